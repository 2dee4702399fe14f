//! Desk-scale mixture-of-transformers vision-language-action model.
//!
//! A reasoning backbone with per-modality expert parameters joined by one
//! global masked self-attention runs two decoding modes — slow autoregressive
//! next-token prediction (generalist) and fast single-pass token-wise
//! prediction from learnable query slots (domain expert) — and conditions a
//! DDPM diffusion-policy action expert on the fast-reasoning hidden states.
//! A deterministic 2-D manipulation world provides language-annotated
//! demonstrations for the whole loop.

pub mod error;
pub mod numerics;
pub mod params;

pub mod action_expert;
pub mod backbone;
pub mod decoding;
pub mod encoders;
pub mod evalbench;
pub mod pipelines;
pub mod simworld;

pub use error::{Error, Result};

/// Concrete scalar used by all model code; gradient checks and the
/// checkpoint format assume this precision.
pub type Tensor = numerics::Tensor<f64>;
pub type Tape = numerics::Tape<f64>;
pub type Tensor32 = numerics::Tensor<f32>;
