//! Hierarchical product distributions: a uniform mixture of `K` product
//! distributions over group attributes, per-slot individual attributes and
//! group size, fitted to noisy measurements by gradient descent.

pub mod answer;
pub mod layout;
pub mod net;

use std::sync::Arc;

use ndarray::Array2;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adaptive::{run_rounds, AdaptiveModel, Measurement, Mechanisms, RoundRecord};
use crate::domain::{DomainError, DomainSchema, GroupRecord, HierarchicalDataset};
use crate::privacy::NoiseSource;
use crate::scalar::Scalar;

pub use answer::{answer, answer_all, answer_compiled, compile, compile_all, loss, CompiledQuery};
pub use layout::{default_slot_map, init_tables, Layout, ProbTables, Structure};
pub use net::{GeneratorNet, NetShape};

#[derive(Debug, Error)]
pub enum HpdError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid query: {0}")]
    Query(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Domain(#[from] DomainError),
}

pub type Result<T> = std::result::Result<T, HpdError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Logits are the parameters.
    Fixed,
    /// Logits come from a generator network fed fixed noise.
    Gen,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HpdConfig {
    pub k: usize,
    pub variant: Variant,
    /// Defaults to 0.1 (Fixed) or 1e-4 (Gen).
    pub lr: Option<f64>,
    pub optimizer: OptimizerKind,
    pub t_max: usize,
    pub ema_decay: f64,
    pub hidden: (usize, usize),
    /// Defaults to `k`.
    pub latent: Option<usize>,
    /// Draw fresh generator noise at every gradient step.
    pub resample_noise: bool,
    pub slot_map: Option<Vec<usize>>,
}

impl Default for HpdConfig {
    fn default() -> Self {
        Self {
            k: 1000,
            variant: Variant::Fixed,
            lr: None,
            optimizer: OptimizerKind::Adam,
            t_max: 100,
            ema_decay: 0.9,
            hidden: (512, 1024),
            latent: None,
            resample_noise: false,
            slot_map: None,
        }
    }
}

impl HpdConfig {
    pub fn learning_rate(&self) -> f64 {
        self.lr.unwrap_or(match self.variant {
            Variant::Fixed => 0.1,
            Variant::Gen => 1e-4,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HpdModel<T> {
    layout: Arc<Layout>,
    net: Option<GeneratorNet<T>>,
    params: Vec<T>,
}

impl<T: Scalar> HpdModel<T> {
    pub fn fixed(layout: Arc<Layout>, rng: &mut NoiseSource) -> Self {
        let params = layout::init_logits(&layout, rng);
        Self { layout, net: None, params }
    }

    pub fn generator(layout: Arc<Layout>, hidden: (usize, usize), latent: usize, rng: &mut NoiseSource) -> Self {
        let shape = NetShape {
            latent,
            hidden,
            out: layout.width(),
        };
        let (net, params) = GeneratorNet::new(layout.k(), shape, rng);
        Self {
            layout,
            net: Some(net),
            params,
        }
    }

    pub fn new(schema: &DomainSchema, config: &HpdConfig, rng: &mut NoiseSource) -> Result<Self> {
        let layout = Layout::new(schema, config.k, config.slot_map.clone())?;
        Ok(match config.variant {
            Variant::Fixed => Self::fixed(layout, rng),
            Variant::Gen => Self::generator(layout, config.hidden, config.latent.unwrap_or(config.k), rng),
        })
    }

    /// Zero logits: every block uniform.
    pub fn uniform(layout: Arc<Layout>) -> Self {
        let params = vec![T::zero(); layout.n_params()];
        Self { layout, net: None, params }
    }

    pub fn from_logits(layout: Arc<Layout>, logits: Vec<T>) -> Self {
        assert_eq!(logits.len(), layout.n_params());
        Self {
            layout,
            net: None,
            params: logits,
        }
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn variant(&self) -> Variant {
        if self.net.is_some() {
            Variant::Gen
        } else {
            Variant::Fixed
        }
    }

    pub fn net(&self) -> Option<&GeneratorNet<T>> {
        self.net.as_ref()
    }

    pub fn net_mut(&mut self) -> Option<&mut GeneratorNet<T>> {
        self.net.as_mut()
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    pub fn logits(&self) -> Vec<T> {
        match &self.net {
            None => self.params.clone(),
            Some(net) => net.logits(&self.params),
        }
    }

    pub fn tables(&self) -> ProbTables<T> {
        ProbTables::from_logits(self.layout.clone(), self.logits())
    }

    /// Loss over the given measurements and its gradient with respect to
    /// the parameters.
    pub fn loss_grad(&self, queries: &[&CompiledQuery], measured: &[T]) -> (T, Vec<T>) {
        match &self.net {
            None => answer::loss_grad_logits(&self.tables(), queries, measured),
            Some(net) => {
                let (logits, cache) = net.forward(&self.params);
                let tables = ProbTables::from_logits(self.layout.clone(), logits);
                let (loss, dlogits) = answer::loss_grad_logits(&tables, queries, measured);
                (loss, net.backward(&self.params, &cache, &dlogits))
            }
        }
    }

    /// Gradient of one answer with respect to the parameters.
    pub fn answer_grad(&self, q: &CompiledQuery) -> Vec<T> {
        match &self.net {
            None => answer::answer_grad_logits(&self.tables(), q),
            Some(net) => {
                let (logits, cache) = net.forward(&self.params);
                let tables = ProbTables::from_logits(self.layout.clone(), logits);
                net.backward(&self.params, &cache, &answer::answer_grad_logits(&tables, q))
            }
        }
    }
}

/// Adam or plain gradient descent over a flat parameter vector.
#[derive(Debug, Clone)]
pub struct Optimizer<T> {
    kind: OptimizerKind,
    lr: T,
    m: Vec<T>,
    v: Vec<T>,
    t: i32,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(kind: OptimizerKind, lr: f64, n: usize) -> Self {
        Self {
            kind,
            lr: T::of(lr),
            m: vec![T::zero(); n],
            v: vec![T::zero(); n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [T], grad: &[T]) {
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, &g) in params.iter_mut().zip(grad) {
                    *p = *p - self.lr * g;
                }
            }
            OptimizerKind::Adam => {
                let (b1, b2, eps) = (T::of(0.9), T::of(0.999), T::of(1e-8));
                self.t += 1;
                let c1 = T::one() - b1.powi(self.t);
                let c2 = T::one() - b2.powi(self.t);
                for (((p, &g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
                    *m = b1 * *m + (T::one() - b1) * g;
                    *v = b2 * *v + (T::one() - b2) * g * g;
                    *p = *p - self.lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                }
            }
        }
    }
}

/// Up to `t_max` gradient steps on the measurements whose residual is at
/// least `gamma`, stopping once every residual is below it. Returns the
/// number of steps taken.
pub fn hpd_update<T: Scalar>(
    model: &mut HpdModel<T>,
    optimizer: &mut Optimizer<T>,
    queries: &[&CompiledQuery],
    measured: &[T],
    t_max: usize,
    gamma: T,
    mut resample: Option<&mut NoiseSource>,
) -> usize {
    let mut steps = 0;
    let mut tables = model.tables();
    for _ in 0..t_max {
        let residuals: Vec<T> = queries
            .iter()
            .zip(measured)
            .map(|(q, &m)| (m - answer_compiled(&tables, q)).abs())
            .collect();
        let selected: Vec<usize> = (0..queries.len()).filter(|&i| residuals[i] >= gamma).collect();
        if selected.is_empty() {
            break;
        }
        let qs: Vec<&CompiledQuery> = selected.iter().map(|&i| queries[i]).collect();
        let ms: Vec<T> = selected.iter().map(|&i| measured[i]).collect();
        let (_, grad) = model.loss_grad(&qs, &ms);
        optimizer.step(&mut model.params, &grad);
        steps += 1;
        if let (Some(rng), Some(net)) = (resample.as_deref_mut(), model.net.as_mut()) {
            let (rows, latent) = net.noise().dim();
            net.set_noise(GeneratorNet::draw_noise(rows, latent, rng));
        }
        tables = model.tables();
    }
    steps
}

/// `ema ← ema + (1 − β)(x − ema)`, exact on constant input.
fn ema_step<T: Scalar>(ema: &mut [T], x: &[T], decay: T) {
    let w = T::one() - decay;
    for (e, &v) in ema.iter_mut().zip(x) {
        *e = *e + w * (v - *e);
    }
}

/// Adaptive-loop state for HPD.
pub struct HpdRun<'a, T> {
    model: HpdModel<T>,
    queries: &'a [CompiledQuery],
    optimizer: Optimizer<T>,
    t_max: usize,
    decay: T,
    resample: bool,
    total_rounds: usize,
    gamma: Option<T>,
    ema: Option<Vec<T>>,
    steps: Vec<usize>,
}

impl<'a, T: Scalar> HpdRun<'a, T> {
    pub fn new(model: HpdModel<T>, queries: &'a [CompiledQuery], config: &HpdConfig, total_rounds: usize) -> Self {
        let optimizer = Optimizer::new(config.optimizer, config.learning_rate(), model.params.len());
        // Round 0 belongs to the averaged window when T/2 = 0.
        let ema = (total_rounds / 2 == 0).then(|| model.params.clone());
        Self {
            model,
            queries,
            optimizer,
            t_max: config.t_max,
            decay: T::of(config.ema_decay),
            resample: config.resample_noise,
            total_rounds,
            gamma: None,
            ema,
            steps: Vec::new(),
        }
    }

    pub fn model(&self) -> &HpdModel<T> {
        &self.model
    }

    pub fn gamma(&self) -> Option<T> {
        self.gamma
    }

    /// Gradient steps taken in each round.
    pub fn steps(&self) -> &[usize] {
        &self.steps
    }

    /// The model with averaged parameters.
    pub fn output(self) -> HpdModel<T> {
        let mut model = self.model;
        if let Some(ema) = self.ema {
            model.params = ema;
        }
        model
    }
}

impl<T: Scalar> AdaptiveModel for HpdRun<'_, T> {
    fn answers(&self) -> Vec<f64> {
        answer_all(&self.model.tables(), self.queries)
            .into_iter()
            .map(Scalar::to_f64_lossy)
            .collect()
    }

    fn update(&mut self, measurements: &[Measurement], _residual: f64, rng: &mut NoiseSource) {
        let qs: Vec<&CompiledQuery> = measurements.iter().map(|m| &self.queries[m.query]).collect();
        let ms: Vec<T> = measurements.iter().map(|m| T::of(m.value)).collect();
        // γ: EMA over the residuals of every measurement so far, taken
        // against the model that made this round's selection.
        let tables = self.model.tables();
        let mut residuals = qs.iter().zip(&ms).map(|(q, &m)| (m - answer_compiled(&tables, q)).abs());
        let first = residuals.next().expect("at least one measurement");
        let gamma = residuals.fold(first, |g, r| g + (T::one() - self.decay) * (r - g));
        self.gamma = Some(gamma);
        let resample = if self.resample { Some(rng) } else { None };
        let steps = hpd_update(&mut self.model, &mut self.optimizer, &qs, &ms, self.t_max, gamma, resample);
        self.steps.push(steps);
    }

    fn end_round(&mut self, round: usize) {
        if round < self.total_rounds / 2 {
            return;
        }
        match &mut self.ema {
            None => self.ema = Some(self.model.params.clone()),
            Some(ema) => ema_step(ema, &self.model.params, self.decay),
        }
    }
}

/// Runs HPD and returns the model with averaged parameters.
#[allow(clippy::too_many_arguments)]
pub fn run_hpd<T: Scalar>(
    schema: &DomainSchema,
    queries: &[CompiledQuery],
    mechanisms: &mut impl Mechanisms,
    rounds: usize,
    config: &HpdConfig,
    clamp: bool,
    rng: &mut NoiseSource,
    observe: impl FnMut(&RoundRecord, &HpdRun<'_, T>),
) -> Result<HpdModel<T>> {
    let model = HpdModel::new(schema, config, rng)?;
    let mut run = HpdRun::new(model, queries, config, rounds);
    run_rounds(&mut run, mechanisms, rounds, clamp, rng, observe);
    Ok(run.output())
}

fn draw<T: Scalar>(block: &[T], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in block.iter().enumerate() {
        acc += p.to_f64_lossy();
        if u < acc {
            return i;
        }
    }
    // rounding left a sliver above the last cumulative value
    block.iter().rposition(|p| *p > T::zero()).unwrap_or(block.len() - 1)
}

fn draw_member<T: Scalar>(tables: &ProbTables<T>, k: usize, table: usize, rng: &mut impl Rng) -> Vec<u32> {
    let schema = tables.layout().schema();
    (0..schema.individual_attrs().len())
        .map(|a| tables.indiv_block(k, table, a).map_or(0, |b| draw(b, rng) as u32))
        .collect()
}

/// Draws `n` groups: a uniform component, then size, group attributes and
/// members from that component's tables.
pub fn sample_groups<T: Scalar>(tables: &ProbTables<T>, n: usize, rng: &mut impl Rng) -> Result<HierarchicalDataset> {
    let layout = tables.layout();
    let schema = layout.schema();
    let mut groups = Vec::with_capacity(n);
    for _ in 0..n {
        let k = rng.random_range(0..layout.k());
        let group_values: Vec<u32> = (0..schema.group_attrs().len())
            .map(|a| draw(tables.group_block(k, a), rng) as u32)
            .collect();
        let sizes = tables.size_block(k);
        let members = match layout.structure() {
            Structure::Standard { slot_map } => {
                let m = draw(sizes, rng) + 1;
                (0..m).map(|j| draw_member(tables, k, slot_map[j], rng)).collect()
            }
            Structure::Relational => {
                let rel = layout.relationship().expect("relational layout");
                let mut members = Vec::new();
                let mut person = |table: usize, value: u32, rng: &mut _| {
                    let mut m = draw_member(tables, k, table, rng);
                    m[rel.relate_attr] = value;
                    members.push(m);
                };
                person(layout::HEAD, rel.head_value, rng);
                if draw(&sizes[..2], rng) == 1 {
                    person(layout::SPOUSE, rel.spouse_value, rng);
                }
                for _ in 0..draw(&sizes[2..], rng) {
                    person(layout::CHILD, rel.child_value, rng);
                }
                members
            }
        };
        groups.push(GroupRecord::new(group_values, members));
    }
    Ok(HierarchicalDataset::new(schema.clone(), groups)?)
}

/// Serialized form of an [`HpdModel`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HpdCheckpoint {
    pub schema: DomainSchema,
    pub schema_fingerprint: String,
    pub k: usize,
    pub structure: Structure,
    pub variant: Variant,
    pub params: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub net: Option<NetShape>,
    /// Row-major `K × latent` noise for the generator.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise: Option<Vec<f64>>,
}

impl<T: Scalar> HpdModel<T> {
    pub fn to_checkpoint(&self) -> HpdCheckpoint {
        let schema = self.layout.schema().clone();
        HpdCheckpoint {
            schema_fingerprint: schema.fingerprint(),
            schema,
            k: self.layout.k(),
            structure: self.layout.structure().clone(),
            variant: self.variant(),
            params: self.params.iter().map(|p| p.to_f64_lossy()).collect(),
            net: self.net.as_ref().map(|n| n.shape()),
            noise: self.net.as_ref().map(|n| n.noise().iter().map(|x| x.to_f64_lossy()).collect()),
        }
    }

    pub fn from_checkpoint(c: &HpdCheckpoint) -> Result<Self> {
        if c.schema.fingerprint() != c.schema_fingerprint {
            return Err(HpdError::Checkpoint("schema fingerprint mismatch".into()));
        }
        let slot_map = match &c.structure {
            Structure::Standard { slot_map } => Some(slot_map.clone()),
            Structure::Relational => None,
        };
        let layout = Layout::new(&c.schema, c.k, slot_map)?;
        let params: Vec<T> = c.params.iter().map(|&p| T::of(p)).collect();
        let net = match (c.variant, c.net, &c.noise) {
            (Variant::Fixed, None, None) => None,
            (Variant::Gen, Some(shape), Some(noise)) => {
                let z = Array2::from_shape_vec((c.k, shape.latent), noise.iter().map(|&x| T::of(x)).collect())
                    .map_err(|e| HpdError::Checkpoint(e.to_string()))?;
                Some(GeneratorNet::from_parts(shape, z))
            }
            _ => return Err(HpdError::Checkpoint("variant does not match stored network".into())),
        };
        let expected = net.as_ref().map_or(layout.n_params(), |n| n.shape().n_params());
        if params.len() != expected {
            return Err(HpdError::Checkpoint(format!("expected {expected} parameters, found {}", params.len())));
        }
        Ok(Self { layout, net, params })
    }
}

/// Answers of the model's tables on every compiled query, as f64.
pub fn model_answers<T: Scalar>(model: &HpdModel<T>, queries: &[CompiledQuery]) -> Vec<f64> {
    let tables = model.tables();
    queries
        .par_iter()
        .map(|q| answer_compiled(&tables, q).to_f64_lossy())
        .collect()
}
