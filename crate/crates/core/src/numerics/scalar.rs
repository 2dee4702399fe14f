//! Scalar abstraction for the tensor/tape machinery.
//!
//! All core math is generic over [`Scalar`] (f32 or f64). The rest of the
//! crate works through the f64 aliases exported at the crate root, which is
//! the precision every gradient check and checkpoint assumes.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign};

/// Floating-point element of tensors and tapes.
pub trait Scalar:
    Float + FromPrimitive + NumAssign + Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// Lossy cast from an f64 constant.
    fn from_c(x: f64) -> Self {
        Self::from_f64(x).expect("finite f64 constant")
    }

    /// Widening cast back to f64 (exact for f32/f64).
    fn to_c(self) -> f64;
}

impl Scalar for f32 {
    fn to_c(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn to_c(self) -> f64 {
        self
    }
}
