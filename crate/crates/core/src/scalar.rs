//! Numeric abstractions shared by the synthesizers.
//!
//! [`Scalar`] is the floating-point bound used by anything that needs
//! `exp`/`ln` (softmax tables, multiplicative weights, networks).
//! [`Field`] is the weaker bound needed to *evaluate* linear queries on a
//! histogram; it is also implemented for [`BigRational`] so histogram answers
//! can be compared exactly against ground truth.

use std::fmt::{Debug, Display};

use ndarray::{LinalgScalar, ScalarOperand};
use num_bigint::BigInt;
use num_rational::{BigRational, Ratio};
use num_traits::{Float, FromPrimitive, Num, ToPrimitive};

/// Floating point: f32 or f64.
pub trait Scalar:
    Float
    + Field
    + FromPrimitive
    + ToPrimitive
    + LinalgScalar
    + ScalarOperand
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    fn of(x: f64) -> Self {
        <Self as FromPrimitive>::from_f64(x).expect("f64 is representable")
    }

    fn to_f64_lossy(self) -> f64 {
        ToPrimitive::to_f64(&self).unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Exact or approximate numbers closed under `+ - * /`.
pub trait Field: Num + Clone + PartialOrd + Debug {
    fn from_count(n: u64) -> Self;
}

impl Field for f32 {
    fn from_count(n: u64) -> Self {
        n as f32
    }
}

impl Field for f64 {
    fn from_count(n: u64) -> Self {
        n as f64
    }
}

impl Field for BigRational {
    fn from_count(n: u64) -> Self {
        Ratio::from_integer(BigInt::from(n))
    }
}

/// Exact rational used for sensitivities and ground-truth answers.
pub type Rational = Ratio<u64>;

/// Lossless lift of a [`Rational`] into a big rational.
pub fn to_big(r: &Rational) -> BigRational {
    BigRational::new(BigInt::from(*r.numer()), BigInt::from(*r.denom()))
}

pub fn rational_to_f64(r: &Rational) -> f64 {
    *r.numer() as f64 / *r.denom() as f64
}
