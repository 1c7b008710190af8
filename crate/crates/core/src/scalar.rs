//! Scalar abstraction shared by every numeric routine in the crate.
//!
//! Training runs in `f32`; finite-difference gradient checks run in `f64`.

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};
use std::fmt::{Debug, Display};
use std::iter::Sum;

pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssign + Sum + Default + Debug + Display + Send + Sync + 'static
{
    /// Lossy conversion from an `f64` literal.
    #[inline]
    fn lit(v: f64) -> Self {
        Self::from_f64(v).unwrap_or_else(Self::nan)
    }

    #[inline]
    fn from_f32_value(v: f32) -> Self {
        Self::lit(v as f64)
    }

    #[inline]
    fn to_f32_value(self) -> f32 {
        self.to_f32().unwrap_or(f32::NAN)
    }

    #[inline]
    fn to_f64_value(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    /// Largest-magnitude negative finite value, used for masked logits.
    #[inline]
    fn masked_logit() -> Self {
        Self::min_value()
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
