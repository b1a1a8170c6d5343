//! Context addition network: per-modality conversational context modeling.
//!
//! Pipeline: a temporal inception block (parallel 1-D convolutions with
//! kernel sizes 1, 3, 5, channel-concatenated and projected back to the
//! input width by a 1x1 convolution) captures short-range dependencies; a
//! stacked bidirectional GRU integrates the whole conversation; a residual
//! connection adds the original embeddings to a learned projection of the
//! GRU output; a two-layer classifier head maps each utterance to class
//! logits.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::graph::{concat, Value};
use crate::model::ModelError;
use crate::nn;
use crate::params::{BoundParams, ParameterSet};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CanConfig {
    pub input_dim: usize,
    /// Output channels of each inception branch.
    pub tin_channels_per_kernel: usize,
    pub gru_hidden: usize,
    pub gru_layers: usize,
    pub fc_dropout: f64,
    pub class_count: usize,
}

impl CanConfig {
    /// Full-scale defaults for a given embedding width and class count.
    pub fn with_dims(input_dim: usize, class_count: usize) -> Self {
        CanConfig {
            input_dim,
            tin_channels_per_kernel: input_dim,
            gru_hidden: 512,
            gru_layers: 3,
            fc_dropout: 0.2,
            class_count,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.input_dim == 0
            || self.tin_channels_per_kernel == 0
            || self.gru_hidden == 0
            || self.gru_layers == 0
            || self.class_count == 0
        {
            return Err(ModelError::BadConfig("all dims must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.fc_dropout) {
            return Err(ModelError::BadConfig(format!("fc_dropout {} outside [0,1)", self.fc_dropout)));
        }
        Ok(())
    }
}

/// Per-utterance logits plus the post-residual features feeding them.
pub struct CanOutput<'g> {
    /// `[n, class_count]`, pre-softmax.
    pub logits: Value<'g>,
    /// `[n, input_dim]`, post-residual, pre-dropout.
    pub context_features: Value<'g>,
}

const KERNELS: [usize; 3] = [1, 3, 5];

/// Registers all parameters under `prefix` (e.g. `can.speech`).
/// `with_classifier = false` skips the two classifier layers for variants
/// that consume context features directly.
pub fn init_params(
    ps: &mut ParameterSet,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    cfg: &CanConfig,
    with_classifier: bool,
) {
    let d = cfg.input_dim;
    let c = cfg.tin_channels_per_kernel;
    for k in KERNELS {
        nn::init_conv1d(ps, rng, &format!("{prefix}.tin.k{k}"), k, d, c);
    }
    nn::init_conv1d(ps, rng, &format!("{prefix}.tin.proj"), 1, 3 * c, d);
    nn::init_gru_bidirectional(ps, rng, &format!("{prefix}.gru"), d, cfg.gru_hidden, cfg.gru_layers);
    nn::init_linear(ps, rng, &format!("{prefix}.res"), 2 * cfg.gru_hidden, d);
    if with_classifier {
        nn::init_linear(ps, rng, &format!("{prefix}.fc1"), d, cfg.gru_hidden);
        nn::init_linear(ps, rng, &format!("{prefix}.fc2"), cfg.gru_hidden, cfg.class_count);
    }
}

/// Temporal inception block: `[n, d] -> [n, d]`.
pub fn tin_forward<'g>(p: &BoundParams<'g>, prefix: &str, x: Value<'g>) -> Value<'g> {
    let branches: Vec<Value<'g>> = KERNELS
        .iter()
        .map(|k| nn::conv1d_same_fw(p, &format!("{prefix}.tin.k{k}"), x))
        .collect();
    nn::conv1d_same_fw(p, &format!("{prefix}.tin.proj"), concat(&branches, 1))
}

/// Context features: inception, bidirectional GRU, then the residual
/// connection back onto the raw embeddings. `[n, d] -> [n, d]`.
pub fn context_forward<'g>(
    p: &BoundParams<'g>,
    prefix: &str,
    embeddings: Value<'g>,
    cfg: &CanConfig,
    mask: &[bool],
) -> Value<'g> {
    let tin = tin_forward(p, prefix, embeddings);
    let gru = nn::gru_bidirectional_fw(p, &format!("{prefix}.gru"), tin, cfg.gru_hidden, cfg.gru_layers, mask);
    let projected = nn::linear_fw(p, &format!("{prefix}.res"), gru);
    embeddings.add(projected)
}

/// Full expert: context features plus the classifier head.
pub fn forward<'g>(
    p: &BoundParams<'g>,
    prefix: &str,
    embeddings: Value<'g>,
    cfg: &CanConfig,
    mask: &[bool],
) -> Result<CanOutput<'g>, ModelError> {
    let got = embeddings.shape()[1];
    if got != cfg.input_dim {
        return Err(ModelError::DimMismatch { got, expected: cfg.input_dim });
    }
    let context_features = context_forward(p, prefix, embeddings, cfg, mask);
    let hidden = nn::linear_fw(p, &format!("{prefix}.fc1"), context_features.dropout(cfg.fc_dropout)).relu();
    let logits = nn::linear_fw(p, &format!("{prefix}.fc2"), hidden.dropout(cfg.fc_dropout));
    Ok(CanOutput { logits, context_features })
}
