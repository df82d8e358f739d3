//! End-to-end runs: budget conversion, the adaptive loop for each method,
//! error metrics and result files.

use std::io::{Read, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adaptive::{Mechanisms, PrivateMechanisms, RoundRecord};
use crate::domain::{DomainSchema, HierarchicalDataset, DEFAULT_ENUMERATION_CAP};
use crate::hpd::{self, compile_all, HpdCheckpoint, HpdConfig, HpdError, HpdModel, Layout, Variant};
use crate::mwem::{self, Histogram, HistogramDomain, MwemError};
use crate::privacy::{NoiseSource, PrivacyAccountant, PrivacyError, DEFAULT_ALPHA};
use crate::scalar::rational_to_f64;
use crate::workload::{evaluate_ground_truth, DataCounts, Workload, WorkloadError};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Privacy(#[from] PrivacyError),
    #[error(transparent)]
    Workload(#[from] WorkloadError),
    #[error(transparent)]
    Mwem(#[from] MwemError),
    #[error(transparent)]
    Hpd(#[from] HpdError),
    #[error("invalid run configuration: {0}")]
    Config(String),
    #[error("model schema does not match the data")]
    SchemaMismatch,
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, HarnessError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "mwem")]
    Mwem,
    #[serde(rename = "hpd-fixed")]
    HpdFixed,
    #[serde(rename = "hpd-gen")]
    HpdGen,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Mwem, Method::HpdFixed, Method::HpdGen];

    pub fn name(self) -> &'static str {
        match self {
            Method::Mwem => "mwem",
            Method::HpdFixed => "hpd-fixed",
            Method::HpdGen => "hpd-gen",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Method {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| HarnessError::Config(format!("unknown method {s:?} (expected mwem, hpd-fixed or hpd-gen)")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub method: Method,
    pub epsilon: f64,
    /// `None` means `1 / N_I²`.
    pub delta: Option<f64>,
    pub rounds: usize,
    pub alpha: f64,
    /// Max replays (MWEM) or gradient steps (HPD) per round.
    pub t_max: usize,
    pub seed: u64,
    /// Clamp noisy measurements to `[0, 1]`.
    pub clamp: bool,
    pub enumeration_cap: u64,
    /// HPD settings; `variant` and `t_max` are taken from the fields above.
    pub hpd: HpdConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            method: Method::HpdFixed,
            epsilon: 1.0,
            delta: None,
            rounds: 100,
            alpha: DEFAULT_ALPHA,
            t_max: 100,
            seed: 0,
            clamp: true,
            enumeration_cap: DEFAULT_ENUMERATION_CAP,
            hpd: HpdConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(HarnessError::Config(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if let Some(d) = self.delta {
            if !(d > 0.0 && d < 1.0) {
                return Err(HarnessError::Config(format!("delta must lie in (0, 1), got {d}")));
            }
        }
        if self.rounds == 0 {
            return Err(HarnessError::Config("T must be at least 1".into()));
        }
        Ok(())
    }

    pub fn delta_for(&self, data: &HierarchicalDataset) -> f64 {
        self.delta.unwrap_or_else(|| {
            let n = data.n_individuals() as f64;
            1.0 / (n * n)
        })
    }

    fn hpd_config(&self) -> HpdConfig {
        HpdConfig {
            variant: if self.method == Method::HpdGen {
                Variant::Gen
            } else {
                Variant::Fixed
            },
            t_max: self.t_max,
            ..self.hpd.clone()
        }
    }
}

/// A fitted synthesizer.
#[derive(Debug, Clone)]
pub enum FittedModel {
    Mwem {
        schema: DomainSchema,
        histogram: Histogram<f64>,
    },
    Hpd(HpdModel<f64>),
}

impl FittedModel {
    pub fn schema(&self) -> &DomainSchema {
        match self {
            FittedModel::Mwem { schema, .. } => schema,
            FittedModel::Hpd(m) => m.layout().schema(),
        }
    }

    pub fn to_saved(&self) -> SavedModel {
        match self {
            FittedModel::Mwem { schema, histogram } => SavedModel::Mwem {
                schema_fingerprint: schema.fingerprint(),
                schema: schema.clone(),
                weights: histogram.weights().to_vec(),
            },
            FittedModel::Hpd(m) => SavedModel::Hpd(m.to_checkpoint()),
        }
    }

    pub fn from_saved(saved: &SavedModel, cap: u64) -> Result<Self> {
        Ok(match saved {
            SavedModel::Mwem {
                schema,
                schema_fingerprint,
                weights,
            } => {
                if &schema.fingerprint() != schema_fingerprint {
                    return Err(HarnessError::Config("schema fingerprint mismatch".into()));
                }
                let domain = HistogramDomain::new(schema, cap)?;
                if domain.len() != weights.len() {
                    return Err(MwemError::Length {
                        got: weights.len(),
                        expected: domain.len(),
                    }
                    .into());
                }
                FittedModel::Mwem {
                    schema: schema.clone(),
                    histogram: Histogram::from_weights(weights.clone()),
                }
            }
            SavedModel::Hpd(c) => FittedModel::Hpd(HpdModel::from_checkpoint(c)?),
        })
    }

    /// Draws `n` synthetic groups.
    pub fn sample(&self, n: usize, seed: u64, cap: u64) -> Result<HierarchicalDataset> {
        let mut rng = NoiseSource::derived(seed, 2);
        Ok(match self {
            FittedModel::Mwem { schema, histogram } => {
                let domain = HistogramDomain::new(schema, cap)?;
                histogram.sample(schema, &domain, n, &mut rng).map_err(MwemError::from)?
            }
            FittedModel::Hpd(m) => hpd::sample_groups(&m.tables(), n, &mut rng)?,
        })
    }
}

/// On-disk model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SavedModel {
    Mwem {
        schema: DomainSchema,
        schema_fingerprint: String,
        weights: Vec<f64>,
    },
    Hpd(HpdCheckpoint),
}

impl SavedModel {
    pub fn write_json(&self, writer: impl Write) -> Result<()> {
        serde_json::to_writer(writer, self)?;
        Ok(())
    }

    pub fn read_json(reader: impl Read) -> Result<Self> {
        Ok(serde_json::from_reader(reader)?)
    }
}

/// Anything that answers a workload.
pub trait WorkloadModel {
    fn workload_answers(&self, workload: &Workload) -> Result<Vec<f64>>;
}

impl WorkloadModel for FittedModel {
    fn workload_answers(&self, workload: &Workload) -> Result<Vec<f64>> {
        if &workload.schema != self.schema() {
            return Err(HarnessError::SchemaMismatch);
        }
        match self {
            FittedModel::Mwem { schema, histogram } => {
                let domain = HistogramDomain::new(schema, DEFAULT_ENUMERATION_CAP)?;
                let vectors = domain.query_vectors(workload)?;
                Ok(vectors.par_iter().map(|qv| histogram.answer(qv, &domain)).collect())
            }
            FittedModel::Hpd(m) => m.workload_answers(workload),
        }
    }
}

impl WorkloadModel for HpdModel<f64> {
    fn workload_answers(&self, workload: &Workload) -> Result<Vec<f64>> {
        let qs = compile_all(self.layout(), &workload.queries)?;
        Ok(hpd::model_answers(self, &qs))
    }
}

/// Fixed answers, e.g. an oracle returning the ground truth.
pub struct FixedAnswers(pub Vec<f64>);

impl WorkloadModel for FixedAnswers {
    fn workload_answers(&self, _workload: &Workload) -> Result<Vec<f64>> {
        Ok(self.0.clone())
    }
}

/// The uniform product model: every attribute block and size distribution
/// uniform.
pub fn uniform_model(schema: &DomainSchema) -> Result<HpdModel<f64>> {
    Ok(HpdModel::uniform(Layout::new(schema, 1, None)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub per_query: Vec<f64>,
    pub max_error: f64,
    pub mean_error: f64,
}

pub fn errors_against(answers: &[f64], truth: &[f64]) -> Evaluation {
    let per_query: Vec<f64> = answers.iter().zip(truth).map(|(a, t)| (a - t).abs()).collect();
    let max_error = per_query.iter().copied().fold(0.0, f64::max);
    let mean_error = if per_query.is_empty() {
        0.0
    } else {
        per_query.iter().sum::<f64>() / per_query.len() as f64
    };
    Evaluation {
        per_query,
        max_error,
        mean_error,
    }
}

pub fn ground_truth_f64(workload: &Workload, data: &HierarchicalDataset) -> Result<Vec<f64>> {
    Ok(evaluate_ground_truth(workload, data)?.iter().map(rational_to_f64).collect())
}

/// Per-query absolute errors of `model` against the true answers.
pub fn evaluate_model(model: &impl WorkloadModel, workload: &Workload, data: &HierarchicalDataset) -> Result<Evaluation> {
    let truth = ground_truth_f64(workload, data)?;
    Ok(errors_against(&model.workload_answers(workload)?, &truth))
}

/// Writes `query_id,model_answer,true_answer,abs_error`.
pub fn write_errors(answers: &[f64], truth: &[f64], writer: impl Write) -> Result<()> {
    let mut csv = csv::Writer::from_writer(writer);
    csv.write_record(["query_id", "model_answer", "true_answer", "abs_error"])?;
    for (i, (a, t)) in answers.iter().zip(truth).enumerate() {
        csv.write_record([i.to_string(), a.to_string(), t.to_string(), (a - t).abs().to_string()])?;
    }
    csv.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub round: usize,
    pub selected: usize,
    pub measured: f64,
    /// Max workload error of the current (not averaged) model after the
    /// round's update.
    pub max_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub method: Method,
    pub seed: u64,
    pub epsilon: f64,
    pub delta: f64,
    pub rho: f64,
    pub alpha: f64,
    pub eps0: f64,
    pub rounds: usize,
    pub sensitivity: f64,
    /// ρ recomputed from the per-round costs.
    pub composed_rho: f64,
    /// Calls to the selection and measurement mechanisms.
    pub mechanism_calls: usize,
    pub per_query_errors: Vec<f64>,
    pub max_error: f64,
    pub mean_error: f64,
    pub trace: Vec<TraceRow>,
}

/// Converts the budget, runs `config.rounds` rounds and scores the output
/// against the true answers.
pub fn run_experiment(config: &RunConfig, data: &HierarchicalDataset, workload: &Workload) -> Result<(RunResult, FittedModel)> {
    config.validate()?;
    if &workload.schema != data.schema() {
        return Err(HarnessError::SchemaMismatch);
    }
    let truth = ground_truth_f64(workload, data)?;
    let sensitivity = rational_to_f64(&workload.max_sensitivity(DataCounts::of(data)));
    let delta = config.delta_for(data);
    let accountant = PrivacyAccountant::from_epsilon(config.epsilon, delta, config.rounds, config.alpha)?;
    let report = accountant.compose_check();

    let mut mechanisms = PrivateMechanisms::new(&truth, &accountant, sensitivity, NoiseSource::derived(config.seed, 0));
    let mut rng = NoiseSource::derived(config.seed, 1);
    let mut trace = Vec::with_capacity(config.rounds);
    let record = |trace: &mut Vec<TraceRow>, r: &RoundRecord, answers: Vec<f64>| {
        trace.push(TraceRow {
            round: r.round,
            selected: r.selected,
            measured: r.measured,
            max_error: errors_against(&answers, &truth).max_error,
        });
    };

    let (model, answers) = match config.method {
        Method::Mwem => {
            let domain = HistogramDomain::new(data.schema(), config.enumeration_cap)?;
            let vectors = domain.query_vectors(workload)?;
            let hist: Histogram<f64> = mwem::run_mwem(
                &domain,
                &vectors,
                &mut mechanisms,
                config.rounds,
                config.t_max,
                config.clamp,
                &mut rng,
                |r, m| {
                    use crate::adaptive::AdaptiveModel;
                    record(&mut trace, r, m.answers())
                },
            );
            let answers = vectors.par_iter().map(|qv| hist.answer(qv, &domain)).collect();
            (
                FittedModel::Mwem {
                    schema: data.schema().clone(),
                    histogram: hist,
                },
                answers,
            )
        }
        Method::HpdFixed | Method::HpdGen => {
            let hpd_config = config.hpd_config();
            let layout = Layout::new(data.schema(), hpd_config.k, hpd_config.slot_map.clone())?;
            let queries = compile_all(&layout, &workload.queries)?;
            let model = hpd::run_hpd::<f64>(
                data.schema(),
                &queries,
                &mut mechanisms,
                config.rounds,
                &hpd_config,
                config.clamp,
                &mut rng,
                |r, run| {
                    use crate::adaptive::AdaptiveModel;
                    record(&mut trace, r, run.answers())
                },
            )?;
            let answers = hpd::model_answers(&model, &queries);
            (FittedModel::Hpd(model), answers)
        }
    };

    let eval = errors_against(&answers, &truth);
    let result = RunResult {
        method: config.method,
        seed: config.seed,
        epsilon: config.epsilon,
        delta,
        rho: accountant.rho(),
        alpha: accountant.alpha(),
        eps0: accountant.eps0(),
        rounds: config.rounds,
        sensitivity,
        composed_rho: report.total,
        mechanism_calls: mechanisms.invocations(),
        per_query_errors: eval.per_query,
        max_error: eval.max_error,
        mean_error: eval.mean_error,
        trace,
    };
    Ok((result, model))
}

/// One cell of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub method: Method,
    pub epsilon: f64,
    pub seed: u64,
    pub max_error: f64,
    pub mean_error: f64,
}

/// Runs every `(method, ε, seed)` cell; cells run in parallel and rows come
/// back in grid order.
pub fn multi_run(
    base: &RunConfig,
    methods: &[Method],
    epsilons: &[f64],
    seeds: &[u64],
    data: &HierarchicalDataset,
    workload: &Workload,
) -> Result<Vec<SweepRow>> {
    if methods.is_empty() || epsilons.is_empty() || seeds.is_empty() {
        return Err(HarnessError::Config("sweep needs at least one method, epsilon and seed".into()));
    }
    let cells: Vec<(Method, f64, u64)> = methods
        .iter()
        .flat_map(|&m| epsilons.iter().flat_map(move |&e| seeds.iter().map(move |&s| (m, e, s))))
        .collect();
    cells
        .into_par_iter()
        .map(|(method, epsilon, seed)| {
            let config = RunConfig {
                method,
                epsilon,
                seed,
                ..base.clone()
            };
            let (r, _) = run_experiment(&config, data, workload)?;
            Ok(SweepRow {
                method,
                epsilon,
                seed,
                max_error: r.max_error,
                mean_error: r.mean_error,
            })
        })
        .collect()
}

pub fn write_sweep(rows: &[SweepRow], writer: impl Write) -> Result<()> {
    let mut csv = csv::Writer::from_writer(writer);
    for row in rows {
        csv.serialize(row)?;
    }
    csv.flush()?;
    Ok(())
}

pub fn read_sweep(reader: impl Read) -> Result<Vec<SweepRow>> {
    let mut csv = csv::Reader::from_reader(reader);
    Ok(csv.deserialize().collect::<std::result::Result<_, _>>()?)
}

/// Mean and standard error over seeds for each `(method, ε)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub method: Method,
    pub epsilon: f64,
    pub runs: usize,
    pub mean_max_error: f64,
    pub se_max_error: f64,
    pub mean_mean_error: f64,
    pub se_mean_error: f64,
}

fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

pub fn summarize(rows: &[SweepRow]) -> Vec<SweepSummary> {
    let mut keys: Vec<(Method, f64)> = Vec::new();
    for r in rows {
        if !keys.iter().any(|&(m, e)| m == r.method && e == r.epsilon) {
            keys.push((r.method, r.epsilon));
        }
    }
    keys.into_iter()
        .map(|(method, epsilon)| {
            let cell: Vec<&SweepRow> = rows.iter().filter(|r| r.method == method && r.epsilon == epsilon).collect();
            let (mean_max_error, se_max_error) = mean_se(&cell.iter().map(|r| r.max_error).collect::<Vec<_>>());
            let (mean_mean_error, se_mean_error) = mean_se(&cell.iter().map(|r| r.mean_error).collect::<Vec<_>>());
            SweepSummary {
                method,
                epsilon,
                runs: cell.len(),
                mean_max_error,
                se_max_error,
                mean_mean_error,
                se_mean_error,
            }
        })
        .collect()
}
