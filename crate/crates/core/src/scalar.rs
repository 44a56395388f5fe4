//! Scalar abstraction shared by the ratio, coverage and reward code.
//!
//! Everything that only needs field arithmetic is generic over [`Scalar`], so
//! it runs in `f32`, `f64`, or exactly in [`Exact`] (a 128-bit rational).
//! Code that needs square roots (group advantages) requires [`num_traits::Float`].

use std::fmt::Debug;

use num_rational::Ratio;
use num_traits::{FromPrimitive, Num, ToPrimitive};

/// Exact rational scalar used by oracles and exact reward arithmetic.
pub type Exact = Ratio<i128>;

/// Field-like numeric type usable for area ratios, coverage and rewards.
pub trait Scalar:
    Num + Copy + PartialOrd + FromPrimitive + ToPrimitive + Debug + Send + Sync + 'static
{
    /// `num / den` computed in this scalar's arithmetic.
    fn from_ratio(num: u64, den: u64) -> Self {
        Self::from_int(num) / Self::from_int(den)
    }

    /// Lossless for integers that fit the mantissa (or always, for rationals).
    fn from_int(v: u64) -> Self {
        Self::from_u64(v).expect("integer representable in scalar")
    }

    /// Nearest representable value to `v`. Used for config-supplied weights.
    fn from_real(v: f64) -> Option<Self> {
        Self::from_f64(v)
    }

    fn to_real(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
impl Scalar for Exact {}

/// Indicator value: one when `cond` holds, zero otherwise.
pub fn indicator<S: Scalar>(cond: bool) -> S {
    if cond {
        S::one()
    } else {
        S::zero()
    }
}
