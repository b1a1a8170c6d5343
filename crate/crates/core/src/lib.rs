//! Mixture-of-experts emotion recognition over precomputed conversation
//! embeddings.
//!
//! The crate is organized bottom-up:
//!
//! * [`tensor`] — dense row-major `f64` tensors.
//! * [`graph`] — reverse-mode automatic differentiation over tensors.
//! * [`nn`] — layers built from graph primitives (linear, conv, GRU,
//!   attention, layer norm, dropout).
//! * [`params`] — named parameter store, initialization, checkpoint I/O.
//! * [`data`] — conversation datasets: JSONL ingestion, synthetic
//!   generation, padded batching.
//! * [`model`] — the three experts (speech/text context networks and the
//!   cross-attention fusion network), the gating network, and the ablation
//!   variants.
//! * [`loss`] — focal, supervised contrastive, KL-consistency losses and
//!   their weighted totals.
//! * [`metrics`] — weighted/per-class F1, confusion matrices, gate-weight
//!   statistics.
//! * [`train`] — the optimizer, gradient clipping, the training loop, and
//!   the finite-difference gradient checker.

pub mod data;
pub mod graph;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod params;
pub mod tensor;
pub mod train;
