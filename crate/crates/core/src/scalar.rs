//! Scalar abstraction for the numeric side of the engine.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating point type the mechanisms and aggregates are computed in: `f32` or `f64`.
pub trait DpFloat:
    Float + FromPrimitive + ToPrimitive + Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// Lossy conversion from `f64`; exact for `f64` itself.
    fn from_f64_lossy(v: f64) -> Self;

    /// Widening conversion used at the wire boundary.
    fn to_f64_lossy(self) -> f64;

    fn half() -> Self {
        Self::from_f64_lossy(0.5)
    }

    fn two() -> Self {
        Self::from_f64_lossy(2.0)
    }
}

impl DpFloat for f32 {
    fn from_f64_lossy(v: f64) -> Self {
        v as f32
    }

    fn to_f64_lossy(self) -> f64 {
        f64::from(self)
    }
}

impl DpFloat for f64 {
    fn from_f64_lossy(v: f64) -> Self {
        v
    }

    fn to_f64_lossy(self) -> f64 {
        self
    }
}
