//! Scalar abstraction for the numeric core.
//!
//! The tensor and graph machinery is generic over the element type so the
//! same kernels can run in `f32` or `f64`. Everything downstream of the core
//! (data generation, models, training, metrics) uses the `f64` aliases
//! exported from the crate root: the lab's contracts are stated in 64-bit
//! arithmetic.

use num_traits::{Float, FromPrimitive, ToPrimitive};
use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

/// Element type usable by [`crate::tensor::DenseArray`] and the value graph.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Display
    + Debug
    + Default
    + Send
    + Sync
    + 'static
{
    /// Lossy conversion from `f64`, used for literals and tolerances.
    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("finite f64 literal converts to any Scalar")
    }

    /// Widening conversion to `f64` for reporting and serialization.
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().expect("Scalar converts to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Shorthand for `S::from_f64_lossy` used throughout the numeric kernels.
pub fn lit<S: Scalar>(v: f64) -> S {
    S::from_f64_lossy(v)
}
