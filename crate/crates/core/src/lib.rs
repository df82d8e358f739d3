//! Differentially private synthetic data for hierarchical tables: groups
//! (households, firms) made of individual rows.
//!
//! Two synthesizers share one select / measure / update loop under zCDP:
//! multiplicative weights over the histogram of group types ([`mwem`]) and
//! mixtures of hierarchical product distributions ([`hpd`]).

pub mod adaptive;
pub mod domain;
pub mod harness;
pub mod hpd;
pub mod mwem;
pub mod privacy;
pub mod scalar;
pub mod synth;
pub mod workload;

pub use scalar::{Field, Rational, Scalar};

/// Histogram over group types in double precision.
pub type Histogram = mwem::Histogram<f64>;
pub type HistogramF32 = mwem::Histogram<f32>;
/// Histogram with exact rational weights.
pub type ExactHistogram = mwem::Histogram<num_rational::BigRational>;
pub type HpdModel = hpd::HpdModel<f64>;
pub type HpdModelF32 = hpd::HpdModel<f32>;
pub type ProbTables = hpd::ProbTables<f64>;
pub type ProbTablesF32 = hpd::ProbTables<f32>;
