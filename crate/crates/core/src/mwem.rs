//! Full-domain baseline: multiplicative weights over a histogram of group
//! types.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::adaptive::{run_rounds, AdaptiveModel, Measurement, Mechanisms, RoundRecord};
use crate::domain::{enumerate_domain, is_valid_group, DomainError, DomainSchema, GroupRecord, GroupTypeSpace, HierarchicalDataset};
use crate::privacy::NoiseSource;
use crate::scalar::{Field, Scalar};
use crate::workload::{count_in_group, Query, QueryKind, Workload};

#[derive(Debug, Error)]
pub enum MwemError {
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error("relationship queries are not supported on histograms")]
    Relationship,
    #[error("histogram length {got} does not match the domain ({expected})")]
    Length { got: usize, expected: usize },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, MwemError>;

/// Enumerated group types plus their sizes `φ_#`.
#[derive(Debug, Clone)]
pub struct HistogramDomain {
    space: GroupTypeSpace,
    sizes: Vec<u16>,
    /// Types that break the household rules; `None` without a relationship
    /// config.
    invalid: Option<Vec<bool>>,
}

impl HistogramDomain {
    pub fn new(schema: &DomainSchema, cap: u64) -> Result<Self> {
        let space = enumerate_domain(schema, cap)?;
        let sizes = space.iter().map(|g| g.size() as u16).collect();
        let invalid = schema
            .relationship()
            .map(|_| space.iter().map(|g| !is_valid_group(schema, &g)).collect());
        Ok(Self { space, sizes, invalid })
    }

    pub fn len(&self) -> usize {
        self.sizes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sizes.is_empty()
    }

    /// Whether type `i` can occur in data of this schema.
    pub fn is_valid(&self, i: usize) -> bool {
        self.invalid.as_ref().is_none_or(|bad| !bad[i])
    }

    /// The starting histogram: uniform over the valid types.
    pub fn initial<T: Field>(&self) -> Histogram<T> {
        match &self.invalid {
            None => Histogram::uniform(self.len()),
            Some(bad) => Histogram::uniform_on(bad.iter().map(|b| !b)),
        }
    }

    pub fn space(&self) -> &GroupTypeSpace {
        &self.space
    }

    pub fn sizes(&self) -> &[u16] {
        &self.sizes
    }

    pub fn max_group_size(&self) -> usize {
        self.space.max_group_size()
    }

    pub fn query_vector(&self, q: &Query) -> Result<QueryVector> {
        let individual = match q.kind {
            QueryKind::GroupLevel => false,
            QueryKind::IndividualLevel => true,
            QueryKind::Relationship(_) => return Err(MwemError::Relationship),
        };
        let phi = self.space.iter().map(|g| count_in_group(q, &g, None) as u16).collect();
        Ok(QueryVector { individual, phi })
    }

    pub fn query_vectors(&self, workload: &Workload) -> Result<Vec<QueryVector>> {
        workload.queries.par_iter().map(|q| self.query_vector(q)).collect()
    }
}

/// `φ(x)` for every group type `x`.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryVector {
    /// Individual-level: answers are `⟨φ, A⟩ / ⟨φ_#, A⟩`.
    pub individual: bool,
    pub phi: Vec<u16>,
}

/// Normalized weights over the canonical group types.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram<T> {
    weights: Vec<T>,
}

impl<T: Field> Histogram<T> {
    pub fn from_weights(weights: Vec<T>) -> Self {
        Self { weights }
    }

    pub fn weights(&self) -> &[T] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn uniform(len: usize) -> Self {
        let w = T::one() / T::from_count(len as u64);
        Self { weights: vec![w; len] }
    }

    /// Uniform over the cells where `support` is true, zero elsewhere.
    pub fn uniform_on(support: impl IntoIterator<Item = bool>) -> Self {
        let support: Vec<bool> = support.into_iter().collect();
        let n = support.iter().filter(|&&b| b).count();
        let w = T::one() / T::from_count(n as u64);
        Self {
            weights: support.into_iter().map(|b| if b { w.clone() } else { T::zero() }).collect(),
        }
    }

    /// Point mass on type `index`.
    pub fn point(len: usize, index: usize) -> Self {
        let mut weights = vec![T::zero(); len];
        weights[index] = T::one();
        Self { weights }
    }

    pub fn sum(&self) -> T {
        self.weights.iter().cloned().fold(T::zero(), |a, b| a + b)
    }

    fn dot(&self, phi: &[u16]) -> T {
        self.weights
            .iter()
            .zip(phi)
            .filter(|(_, &p)| p != 0)
            .fold(T::zero(), |acc, (w, &p)| acc + w.clone() * T::from_count(p as u64))
    }

    /// `f_q(A)`.
    pub fn answer(&self, qv: &QueryVector, domain: &HistogramDomain) -> T {
        let num = self.dot(&qv.phi);
        if qv.individual {
            num / self.dot(domain.sizes())
        } else {
            num
        }
    }
}

/// Empirical distribution of `data` over group types.
pub fn histogram_of<T: Field>(data: &HierarchicalDataset, domain: &HistogramDomain) -> Histogram<T> {
    let mut counts = vec![0u64; domain.len()];
    for g in data.groups() {
        counts[domain.space().encode(g)] += 1;
    }
    let n = T::from_count(data.n_groups() as u64);
    Histogram {
        weights: counts.into_iter().map(|c| T::from_count(c) / n.clone()).collect(),
    }
}

pub fn answer_on_histogram<T: Field>(q: &Query, hist: &Histogram<T>, domain: &HistogramDomain) -> Result<T> {
    if hist.len() != domain.len() {
        return Err(MwemError::Length {
            got: hist.len(),
            expected: domain.len(),
        });
    }
    Ok(hist.answer(&domain.query_vector(q)?, domain))
}

impl<T: Scalar> Histogram<T> {
    fn normalize(&mut self) {
        let total = self.weights.iter().fold(T::zero(), |a, &b| a + b);
        for w in &mut self.weights {
            *w = *w / total;
        }
    }

    /// One multiplicative-weights step toward `measured`. Individual-level
    /// vectors are rescaled by `1/M` so the exponent stays within `[-½, ½]`.
    pub fn mw_update(&mut self, qv: &QueryVector, measured: T, domain: &HistogramDomain) {
        let err = measured - self.answer(qv, domain);
        if err == T::zero() {
            return;
        }
        let scale = if qv.individual {
            T::one() / T::of(domain.max_group_size() as f64)
        } else {
            T::one()
        };
        let half = T::of(0.5);
        for (w, &p) in self.weights.iter_mut().zip(&qv.phi) {
            if p != 0 {
                *w = *w * (T::of(p as f64) * scale * err * half).exp();
            }
        }
        self.normalize();
    }

    /// Replays the measurements with the largest current errors: at most
    /// `t_max` of them, and only those within half of the largest error.
    pub fn mwem_update_round(
        &mut self,
        measured: &[(&QueryVector, T)],
        t_max: usize,
        domain: &HistogramDomain,
        rng: &mut impl Rng,
    ) {
        let errors: Vec<T> = measured.iter().map(|(qv, m)| (*m - self.answer(qv, domain)).abs()).collect();
        let a_max = errors.iter().fold(T::zero(), |a, &b| a.max(b));
        if a_max == T::zero() {
            return;
        }
        let mut order: Vec<usize> = (0..measured.len()).collect();
        order.sort_by(|&a, &b| errors[b].partial_cmp(&errors[a]).unwrap_or(std::cmp::Ordering::Equal));
        order.truncate(t_max);
        let threshold = a_max * T::of(0.5);
        order.retain(|&i| errors[i] >= threshold);
        order.shuffle(rng);
        for i in order {
            let (qv, m) = measured[i];
            self.mw_update(qv, m, domain);
        }
    }

    pub fn to_f64(&self) -> Histogram<f64> {
        Histogram {
            weights: self.weights.iter().map(|w| w.to_f64_lossy()).collect(),
        }
    }

    /// Draws `n` groups i.i.d. from the histogram.
    pub fn sample(&self, schema: &DomainSchema, domain: &HistogramDomain, n: usize, rng: &mut impl Rng) -> std::result::Result<HierarchicalDataset, DomainError> {
        let mut cumulative = Vec::with_capacity(self.len());
        let mut acc = 0.0;
        for w in &self.weights {
            acc += w.to_f64_lossy();
            cumulative.push(acc);
        }
        // u·acc can round up to acc
        let last = self.weights.iter().rposition(|w| w.to_f64_lossy() > 0.0).unwrap_or(0);
        let groups: Vec<GroupRecord> = (0..n)
            .map(|_| {
                let u = rng.random::<f64>() * acc;
                let idx = cumulative.partition_point(|&c| c <= u).min(last);
                domain.space().decode(idx)
            })
            .collect();
        HierarchicalDataset::new(schema.clone(), groups)
    }

    /// `type_index,encoding,weight` rows; encoding is `g|m1|m2…` with
    /// attribute values joined by `-`.
    pub fn write_csv(&self, domain: &HistogramDomain, writer: impl Write) -> Result<()> {
        let mut csv = csv::Writer::from_writer(writer);
        csv.write_record(["type_index", "encoding", "weight"])?;
        for (i, w) in self.weights.iter().enumerate() {
            csv.write_record([i.to_string(), encoding_label(&domain.space().decode(i)), w.to_string()])?;
        }
        csv.flush()?;
        Ok(())
    }
}

fn encoding_label(g: &GroupRecord) -> String {
    let join = |v: &[u32]| v.iter().map(u32::to_string).collect::<Vec<_>>().join("-");
    std::iter::once(join(&g.group_values))
        .chain(g.members.iter().map(|m| join(m)))
        .collect::<Vec<_>>()
        .join("|")
}

/// MWEM state for the adaptive loop: current histogram and the running sum
/// of the histograms entering each round.
pub struct MwemModel<'a, T> {
    domain: &'a HistogramDomain,
    vectors: &'a [QueryVector],
    current: Histogram<T>,
    sum: Vec<T>,
    rounds: usize,
    t_max: usize,
}

impl<'a, T: Scalar> MwemModel<'a, T> {
    pub fn new(domain: &'a HistogramDomain, vectors: &'a [QueryVector], t_max: usize) -> Self {
        Self {
            domain,
            vectors,
            current: domain.initial(),
            sum: vec![T::zero(); domain.len()],
            rounds: 0,
            t_max,
        }
    }

    pub fn current(&self) -> &Histogram<T> {
        &self.current
    }

    /// Average of `A_0 .. A_{T-1}`; uniform when no round has run.
    pub fn output(&self) -> Histogram<T> {
        if self.rounds == 0 {
            return self.domain.initial();
        }
        let n = T::of(self.rounds as f64);
        Histogram {
            weights: self.sum.iter().map(|&s| s / n).collect(),
        }
    }
}

impl<T: Scalar> AdaptiveModel for MwemModel<'_, T> {
    fn answers(&self) -> Vec<f64> {
        self.vectors
            .par_iter()
            .map(|qv| self.current.answer(qv, self.domain).to_f64_lossy())
            .collect()
    }

    fn update(&mut self, measurements: &[Measurement], _residual: f64, rng: &mut NoiseSource) {
        for (s, &w) in self.sum.iter_mut().zip(&self.current.weights) {
            *s = *s + w;
        }
        self.rounds += 1;
        let measured: Vec<(&QueryVector, T)> = measurements
            .iter()
            .map(|m| (&self.vectors[m.query], T::of(m.value)))
            .collect();
        let mut next = self.current.clone();
        next.mwem_update_round(&measured, self.t_max, self.domain, rng);
        self.current = next;
    }
}

/// Runs MWEM and returns the averaged histogram.
#[allow(clippy::too_many_arguments)]
pub fn run_mwem<T: Scalar>(
    domain: &HistogramDomain,
    vectors: &[QueryVector],
    mechanisms: &mut impl Mechanisms,
    rounds: usize,
    t_max: usize,
    clamp: bool,
    rng: &mut NoiseSource,
    observe: impl FnMut(&RoundRecord, &MwemModel<'_, T>),
) -> Histogram<T> {
    let mut model = MwemModel::new(domain, vectors, t_max);
    run_rounds(&mut model, mechanisms, rounds, clamp, rng, observe);
    model.output()
}
