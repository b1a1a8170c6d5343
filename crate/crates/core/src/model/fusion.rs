//! Multimodal fusion expert: bidirectional cross-attention between the
//! speech and text streams, per-stream self-attention stacks, and a linear
//! classifier over the concatenated streams.
//!
//! Structure per conversation of paired utterances:
//!
//! ```text
//! x_s = FC(E_s)                x_t = FC(E_t)            (to model_dim)
//! m_ts = LN(x_s + MHA(q=x_s, k=x_t, v=x_t))             (cross, once)
//! m_st = LN(x_t + MHA(q=x_t, k=x_s, v=x_s))
//! m_s  = SelfAttnStack_s(m_ts)                          (layers blocks)
//! m_t  = SelfAttnStack_t(m_st)
//! logits = FC([m_s ; m_t])
//! ```
//!
//! Each self-attention layer is a pre-LN transformer block (attention with
//! residual, then a 4x-wide two-layer feed-forward with residual), with
//! dropout applied post-attention and post-feed-forward.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::graph::{concat, Value};
use crate::model::ModelError;
use crate::nn;
use crate::params::{BoundParams, ParameterSet};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionConfig {
    pub model_dim: usize,
    pub heads: usize,
    /// Self-attention layers per stream (the cross-attention stage runs
    /// once, before the stacks).
    pub layers: usize,
    pub dropout: f64,
    pub class_count: usize,
}

impl FusionConfig {
    pub fn with_classes(class_count: usize) -> Self {
        FusionConfig { model_dim: 120, heads: 4, layers: 4, dropout: 0.5, class_count }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.model_dim == 0 || self.heads == 0 || self.class_count == 0 {
            return Err(ModelError::BadConfig("all dims must be >= 1".into()));
        }
        if self.model_dim % self.heads != 0 {
            return Err(ModelError::BadConfig(format!(
                "model_dim {} not divisible by heads {}",
                self.model_dim, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::BadConfig(format!("dropout {} outside [0,1)", self.dropout)));
        }
        Ok(())
    }
}

/// All intermediate fused representations plus the expert logits.
pub struct FusionState<'g> {
    /// Speech stream after cross-attention from text, `[n, model_dim]`.
    pub m_ts: Value<'g>,
    /// Text stream after cross-attention from speech, `[n, model_dim]`.
    pub m_st: Value<'g>,
    /// Speech stream after its self-attention stack; contrastive input.
    pub m_s: Value<'g>,
    /// Text stream after its self-attention stack; contrastive input.
    pub m_t: Value<'g>,
    /// `[n, class_count]` pre-softmax logits (absent for headless builds).
    pub logits: Option<Value<'g>>,
}

/// The pair consumed by the contrastive loss, un-normalized.
pub fn fusion_representations<'g>(state: &FusionState<'g>) -> (Value<'g>, Value<'g>) {
    (state.m_s, state.m_t)
}

pub fn init_params(
    ps: &mut ParameterSet,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    cfg: &FusionConfig,
    d_s: usize,
    d_t: usize,
    with_head: bool,
) {
    let dm = cfg.model_dim;
    nn::init_linear(ps, rng, &format!("{prefix}.in_s"), d_s, dm);
    nn::init_linear(ps, rng, &format!("{prefix}.in_t"), d_t, dm);
    for dir in ["ts", "st"] {
        nn::init_mha(ps, rng, &format!("{prefix}.cross.{dir}.attn"), dm);
        nn::init_layer_norm(ps, &format!("{prefix}.cross.{dir}.ln"), dm);
    }
    for stream in ["s", "t"] {
        for layer in 0..cfg.layers {
            let base = format!("{prefix}.selfattn.{stream}.l{layer}");
            nn::init_layer_norm(ps, &format!("{base}.ln1"), dm);
            nn::init_mha(ps, rng, &format!("{base}.attn"), dm);
            nn::init_layer_norm(ps, &format!("{base}.ln2"), dm);
            nn::init_linear(ps, rng, &format!("{base}.ff1"), dm, 4 * dm);
            nn::init_linear(ps, rng, &format!("{base}.ff2"), 4 * dm, dm);
        }
    }
    if with_head {
        nn::init_linear(ps, rng, &format!("{prefix}.head"), 2 * dm, cfg.class_count);
    }
}

fn self_attention_stack<'g>(
    p: &BoundParams<'g>,
    base: &str,
    mut x: Value<'g>,
    cfg: &FusionConfig,
    mask_bias: Value<'g>,
) -> Value<'g> {
    for layer in 0..cfg.layers {
        let name = format!("{base}.l{layer}");
        let normed = nn::layer_norm_fw(p, &format!("{name}.ln1"), x);
        let attended = nn::mha_fw(p, &format!("{name}.attn"), normed, normed, normed, cfg.heads, Some(mask_bias));
        x = x.add(attended.dropout(cfg.dropout));
        let normed2 = nn::layer_norm_fw(p, &format!("{name}.ln2"), x);
        let ff = nn::linear_fw(p, &format!("{name}.ff2"), nn::linear_fw(p, &format!("{name}.ff1"), normed2).relu());
        x = x.add(ff.dropout(cfg.dropout));
    }
    x
}

/// Fusion forward pass. Speech and text sequences must be the same length
/// (paired utterances); `mask` marks valid rows. Pass `with_head = false`
/// for variants that replace the classifier.
pub fn forward<'g>(
    p: &BoundParams<'g>,
    prefix: &str,
    e_s: Value<'g>,
    e_t: Value<'g>,
    cfg: &FusionConfig,
    mask: &[bool],
    with_head: bool,
) -> Result<FusionState<'g>, ModelError> {
    let n_s = e_s.shape()[0];
    let n_t = e_t.shape()[0];
    if n_s != n_t {
        return Err(ModelError::LengthMismatch(n_s, n_t));
    }
    let g = e_s.graph();
    let mask_bias = nn::attention_mask_bias(g, n_s, mask);

    let x_s = nn::linear_fw(p, &format!("{prefix}.in_s"), e_s);
    let x_t = nn::linear_fw(p, &format!("{prefix}.in_t"), e_t);

    let cross_ts = nn::mha_fw(p, &format!("{prefix}.cross.ts.attn"), x_s, x_t, x_t, cfg.heads, Some(mask_bias));
    let m_ts = nn::layer_norm_fw(p, &format!("{prefix}.cross.ts.ln"), x_s.add(cross_ts.dropout(cfg.dropout)));
    let cross_st = nn::mha_fw(p, &format!("{prefix}.cross.st.attn"), x_t, x_s, x_s, cfg.heads, Some(mask_bias));
    let m_st = nn::layer_norm_fw(p, &format!("{prefix}.cross.st.ln"), x_t.add(cross_st.dropout(cfg.dropout)));

    let m_s = self_attention_stack(p, &format!("{prefix}.selfattn.s"), m_ts, cfg, mask_bias);
    let m_t = self_attention_stack(p, &format!("{prefix}.selfattn.t"), m_st, cfg, mask_bias);

    let logits = with_head.then(|| nn::linear_fw(p, &format!("{prefix}.head"), concat(&[m_s, m_t], 1)));
    Ok(FusionState { m_ts, m_st, m_s, m_t, logits })
}
