//! The select / measure / update loop shared by every synthesizer.
//!
//! Private answers live only inside a [`Mechanisms`] implementation; models
//! see the workload and the noisy measurements, never the data.

use serde::{Deserialize, Serialize};

use crate::privacy::{exponential_select, gaussian_measure, NoiseSource, PrivacyAccountant};

/// A noisy answer to workload query `query`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    pub query: usize,
    pub value: f64,
}

/// Model state driven by the adaptive loop.
pub trait AdaptiveModel {
    /// Answers to every workload query under the current state.
    fn answers(&self) -> Vec<f64>;

    /// Fits the state to all measurements so far. `residual` is
    /// `m_t - f_{q_t}` for the newest measurement, taken before the update.
    fn update(&mut self, measurements: &[Measurement], residual: f64, rng: &mut NoiseSource);

    /// Called once per round after the update, with the 1-based round.
    fn end_round(&mut self, _round: usize) {}
}

/// The two data accesses each round is allowed.
pub trait Mechanisms {
    fn select(&mut self, model_answers: &[f64]) -> usize;
    fn measure(&mut self, query: usize) -> f64;
    /// Number of `select` plus `measure` calls so far.
    fn invocations(&self) -> usize;
}

/// Exponential selection and Gaussian measurement, parameterized by an
/// accountant and the workload's max sensitivity.
pub struct PrivateMechanisms<'a> {
    truth: &'a [f64],
    select_epsilon: f64,
    measure_epsilon: f64,
    sensitivity: f64,
    noise: NoiseSource,
    calls: usize,
}

impl<'a> PrivateMechanisms<'a> {
    pub fn new(truth: &'a [f64], accountant: &PrivacyAccountant, sensitivity: f64, noise: NoiseSource) -> Self {
        Self {
            truth,
            select_epsilon: accountant.select_epsilon(),
            measure_epsilon: accountant.measure_epsilon(),
            sensitivity,
            noise,
            calls: 0,
        }
    }
}

impl Mechanisms for PrivateMechanisms<'_> {
    fn select(&mut self, model_answers: &[f64]) -> usize {
        self.calls += 1;
        let errors: Vec<f64> = self.truth.iter().zip(model_answers).map(|(t, a)| t - a).collect();
        exponential_select(&errors, self.sensitivity, self.select_epsilon, &mut self.noise)
            .expect("workload is nonempty and sensitivity positive")
    }

    fn measure(&mut self, query: usize) -> f64 {
        self.calls += 1;
        gaussian_measure(self.truth[query], self.sensitivity, self.measure_epsilon, &mut self.noise)
    }

    fn invocations(&self) -> usize {
        self.calls
    }
}

/// Noise-free stand-ins: argmax selection (lowest index on ties) and exact
/// measurement. Used for convergence checks only.
pub struct ExactMechanisms<'a> {
    truth: &'a [f64],
    calls: usize,
}

impl<'a> ExactMechanisms<'a> {
    pub fn new(truth: &'a [f64]) -> Self {
        Self { truth, calls: 0 }
    }
}

impl Mechanisms for ExactMechanisms<'_> {
    fn select(&mut self, model_answers: &[f64]) -> usize {
        self.calls += 1;
        let mut best = 0;
        let mut best_err = f64::NEG_INFINITY;
        for (i, (t, a)) in self.truth.iter().zip(model_answers).enumerate() {
            let err = (t - a).abs();
            if err > best_err {
                best = i;
                best_err = err;
            }
        }
        best
    }

    fn measure(&mut self, query: usize) -> f64 {
        self.calls += 1;
        self.truth[query]
    }

    fn invocations(&self) -> usize {
        self.calls
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub selected: usize,
    pub measured: f64,
}

/// Runs `rounds` rounds of select → measure → update and returns the
/// measurements taken. Noisy values are clamped to `[0, 1]` when `clamp`.
pub fn run_rounds<M: AdaptiveModel>(
    model: &mut M,
    mechanisms: &mut impl Mechanisms,
    rounds: usize,
    clamp: bool,
    rng: &mut NoiseSource,
    mut observe: impl FnMut(&RoundRecord, &M),
) -> Vec<Measurement> {
    let mut measurements = Vec::with_capacity(rounds);
    for round in 1..=rounds {
        let answers = model.answers();
        let selected = mechanisms.select(&answers);
        let mut value = mechanisms.measure(selected);
        if clamp {
            value = value.clamp(0.0, 1.0);
        }
        measurements.push(Measurement {
            query: selected,
            value,
        });
        model.update(&measurements, value - answers[selected], rng);
        model.end_round(round);
        observe(
            &RoundRecord {
                round,
                selected,
                measured: value,
            },
            model,
        );
    }
    measurements
}
