//! zCDP accounting and the two mechanisms every synthesizer spends budget on.
//!
//! A run of `T` rounds makes one exponential-mechanism selection with
//! parameter `α ε₀` and one Gaussian measurement with parameter `(1-α) ε₀`
//! per round. Each costs `½ (·)²` zCDP, so the whole run costs
//! `T/2 (α² + (1-α)²) ε₀²`, which equals `ρ` by construction of `ε₀`.

use rand::distr::Open01;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Budget split used throughout the experiments.
pub const DEFAULT_ALPHA: f64 = 0.67;

const COMPOSE_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum PrivacyError {
    #[error("rho must be positive and finite (got {0})")]
    Rho(f64),
    #[error("epsilon must be positive and finite (got {0})")]
    Epsilon(f64),
    #[error("delta must lie in (0, 1) (got {0})")]
    Delta(f64),
    #[error("alpha must lie in (0, 1) (got {0})")]
    Alpha(f64),
    #[error("number of rounds must be at least 1")]
    Rounds,
    #[error("sensitivity must be positive (got {0})")]
    Sensitivity(f64),
    #[error("exponential mechanism needs at least one candidate")]
    NoCandidates,
}

pub type Result<T> = std::result::Result<T, PrivacyError>;

fn check_rho(rho: f64) -> Result<()> {
    if rho > 0.0 && rho.is_finite() {
        Ok(())
    } else {
        Err(PrivacyError::Rho(rho))
    }
}

fn check_delta(delta: f64) -> Result<()> {
    if delta > 0.0 && delta < 1.0 {
        Ok(())
    } else {
        Err(PrivacyError::Delta(delta))
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(PrivacyError::Alpha(alpha))
    }
}

/// `ε₀ = sqrt(2ρ / (T (α² + (1-α)²)))`
pub fn eps0_for(rho: f64, rounds: usize, alpha: f64) -> Result<f64> {
    check_rho(rho)?;
    check_alpha(alpha)?;
    if rounds == 0 {
        return Err(PrivacyError::Rounds);
    }
    Ok((2.0 * rho / (rounds as f64 * split_weight(alpha))).sqrt())
}

fn split_weight(alpha: f64) -> f64 {
    alpha * alpha + (1.0 - alpha) * (1.0 - alpha)
}

/// zCDP to approximate DP: `ε = ρ + 2 sqrt(ρ ln(1/δ))`.
pub fn epsilon_for_rho(rho: f64, delta: f64) -> Result<f64> {
    if !(rho >= 0.0 && rho.is_finite()) {
        return Err(PrivacyError::Rho(rho));
    }
    check_delta(delta)?;
    Ok(rho + 2.0 * (rho * (1.0 / delta).ln()).sqrt())
}

/// Inverse of [`epsilon_for_rho`]. With `L = ln(1/δ)`, `sqrt(ρ)` is the
/// positive root of `s² + 2 sqrt(L) s - ε`, computed in the cancellation-free
/// form `ε / (sqrt(L + ε) + sqrt(L))`.
pub fn rho_for_epsilon(epsilon: f64, delta: f64) -> Result<f64> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(PrivacyError::Epsilon(epsilon));
    }
    check_delta(delta)?;
    let l = (1.0 / delta).ln();
    let s = epsilon / ((l + epsilon).sqrt() + l.sqrt());
    Ok(s * s)
}

/// Result of re-composing the per-round costs of an accountant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompositionReport {
    pub per_round: f64,
    pub total: f64,
    pub rho: f64,
}

impl CompositionReport {
    pub fn consistent(&self) -> bool {
        (self.total - self.rho).abs() <= COMPOSE_TOLERANCE * self.rho.max(1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrivacyAccountant {
    rho: f64,
    rounds: usize,
    alpha: f64,
    eps0: f64,
    delta: Option<f64>,
}

impl PrivacyAccountant {
    pub fn new(rho: f64, rounds: usize, alpha: f64) -> Result<Self> {
        let eps0 = eps0_for(rho, rounds, alpha)?;
        Ok(Self {
            rho,
            rounds,
            alpha,
            eps0,
            delta: None,
        })
    }

    /// Accountant whose total zCDP budget converts to `(ε, δ)`-DP.
    pub fn from_epsilon(epsilon: f64, delta: f64, rounds: usize, alpha: f64) -> Result<Self> {
        let rho = rho_for_epsilon(epsilon, delta)?;
        let mut acc = Self::new(rho, rounds, alpha)?;
        acc.delta = Some(delta);
        Ok(acc)
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn rounds(&self) -> usize {
        self.rounds
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn eps0(&self) -> f64 {
        self.eps0
    }

    pub fn delta(&self) -> Option<f64> {
        self.delta
    }

    /// Parameter of the exponential mechanism, `α ε₀`.
    pub fn select_epsilon(&self) -> f64 {
        self.alpha * self.eps0
    }

    /// Parameter of the Gaussian mechanism, `(1-α) ε₀`.
    pub fn measure_epsilon(&self) -> f64 {
        (1.0 - self.alpha) * self.eps0
    }

    /// `(ε, δ)` guarantee of the full run.
    pub fn epsilon(&self, delta: f64) -> Result<f64> {
        epsilon_for_rho(self.rho, delta)
    }

    pub fn compose_check(&self) -> CompositionReport {
        let per_round = 0.5 * split_weight(self.alpha) * self.eps0 * self.eps0;
        let report = CompositionReport {
            per_round,
            total: self.rounds as f64 * per_round,
            rho: self.rho,
        };
        assert!(report.consistent(), "accountant composes to {} but rho is {}", report.total, self.rho);
        report
    }
}

/// Randomness consumed by the mechanisms.
pub trait Noise {
    /// Uniform on the open interval (0, 1).
    fn uniform_open(&mut self) -> f64;

    fn standard_normal(&mut self) -> f64;

    fn gumbel(&mut self) -> f64 {
        -(-self.uniform_open().ln()).ln()
    }
}

/// Seeded generator; the same seed replays the same draws on every platform.
#[derive(Debug, Clone)]
pub struct NoiseSource(ChaCha8Rng);

impl NoiseSource {
    pub fn seeded(seed: u64) -> Self {
        Self(ChaCha8Rng::seed_from_u64(seed))
    }

    /// Independent stream derived from this seed and a label.
    pub fn derived(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self(rng)
    }
}

impl RngCore for NoiseSource {
    fn next_u32(&mut self) -> u32 {
        self.0.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.0.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.0.fill_bytes(dst)
    }
}

impl Noise for NoiseSource {
    fn uniform_open(&mut self) -> f64 {
        self.0.sample(Open01)
    }

    fn standard_normal(&mut self) -> f64 {
        self.0.sample(StandardNormal)
    }
}

/// Exponential mechanism over `|errors|` with score scale `ε / (2Δ)`,
/// sampled by Gumbel-max. Exact ties go to the lowest index.
pub fn exponential_select(errors: &[f64], sensitivity: f64, epsilon: f64, noise: &mut impl Noise) -> Result<usize> {
    if errors.is_empty() {
        return Err(PrivacyError::NoCandidates);
    }
    if !(sensitivity > 0.0) {
        return Err(PrivacyError::Sensitivity(sensitivity));
    }
    let scale = epsilon / (2.0 * sensitivity);
    let mut best = 0;
    let mut best_score = f64::NEG_INFINITY;
    for (i, e) in errors.iter().enumerate() {
        let score = scale * e.abs() + noise.gumbel();
        if score > best_score {
            best = i;
            best_score = score;
        }
    }
    Ok(best)
}

/// `σ = Δ / ε` for the Gaussian mechanism with parameter `ε`.
pub fn gaussian_sigma(sensitivity: f64, epsilon: f64) -> f64 {
    sensitivity / epsilon
}

/// `true_answer + N(0, σ²)`; the value is not clamped.
pub fn gaussian_measure(true_answer: f64, sensitivity: f64, epsilon: f64, noise: &mut impl Noise) -> f64 {
    true_answer + gaussian_sigma(sensitivity, epsilon) * noise.standard_normal()
}
