//! Minimal dense-tensor arithmetic with reverse-mode autodiff.
//!
//! Everything is generic over [`Scalar`]; the crate root re-exports f64
//! aliases used by the model code.

pub mod rng;
pub mod scalar;
pub mod tape;
pub mod tensor;

pub use rng::Rng;
pub use scalar::Scalar;
pub use tape::{NodeId, Tape, MASK_OFF, NORM_EPS, ROPE_BASE};
pub use tensor::Tensor;
