//! The model: two unimodal context-addition experts, a cross-attention
//! fusion expert, a logit-level gating network, and the ablation variants
//! that rewire them.

pub mod can;
pub mod fusion;
pub mod gate;
mod variants;

pub use variants::{argmax_predictions, build_variant, Forward, Model, Variant};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("input dim {got} does not match configured dim {expected}")]
    DimMismatch { got: usize, expected: usize },
    #[error("modality sequence lengths differ: speech {0}, text {1}")]
    LengthMismatch(usize, usize),
    #[error("unknown variant \"{0}\"")]
    UnknownVariant(String),
    #[error("invalid config: {0}")]
    BadConfig(String),
}
