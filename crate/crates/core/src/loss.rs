//! Training objectives: focal loss, supervised multimodal contrastive
//! loss, directional KL consistency, and their weighted per-variant
//! totals.
//!
//! Reductions follow one convention throughout: sum over the utterances of
//! a conversation, mean over the conversations of a batch. Probabilities
//! are floored at [`PROB_FLOOR`] before any logarithm.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{concat, GraphError, Value};
use crate::model::{Forward, Variant};
use crate::nn;

/// Floor applied to probabilities before `log`.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("row {0} has zero norm and cannot be normalized")]
    ZeroNormRow(usize),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("invalid loss config: {0}")]
    BadConfig(String),
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Focal exponent.
    pub gamma: f64,
    /// Contrastive weight.
    pub lambda: f64,
    /// Consistency weight.
    pub alpha: f64,
    /// Contrastive temperature.
    pub tau: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { gamma: 3.0, lambda: 1.0, alpha: 0.1, tau: 1.0 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), LossError> {
        if self.gamma < 0.0 || self.lambda < 0.0 || self.alpha < 0.0 {
            return Err(LossError::BadConfig("gamma, lambda, alpha must be >= 0".into()));
        }
        if self.tau <= 0.0 {
            return Err(LossError::BadConfig(format!("tau {} must be > 0", self.tau)));
        }
        Ok(())
    }
}

/// Scalar values of every component for logging. Weighted terms are
/// already folded in (`multi` includes `lambda * con`, `moe` includes
/// `alpha * kl`), so `total = can + multi + moe`.
#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub can: f64,
    pub multi: f64,
    pub con: f64,
    pub kl: f64,
    pub moe: f64,
    pub total: f64,
}

/// Focal loss summed over valid utterances:
/// `sum_k -(1 - p_true)^gamma * log(p_true)` with a stable softmax and the
/// probability floor.
pub fn focal_loss<'g>(
    logits: Value<'g>,
    labels: &[usize],
    gamma: f64,
    mask: Option<&[bool]>,
) -> Value<'g> {
    let g = logits.graph();
    let classes = logits.shape()[1];
    let probs = logits.softmax();
    let onehot = nn::one_hot(g, labels, classes);
    let p_true = probs.mul(onehot).sum_last_keep();
    let modulator = p_true.affine(-1.0, 1.0).powf(gamma);
    let log_p = p_true.clamp_min(PROB_FLOOR).log();
    let mut per_utt = modulator.mul(log_p).neg();
    if let Some(mask) = mask {
        per_utt = per_utt.mul(nn::mask_column(g, mask));
    }
    per_utt.sum_all()
}

/// Supervised multimodal contrastive loss over one conversation.
///
/// The 2n anchors are the L2-normalized speech and text representations of
/// the n utterances. For each anchor, positives are the same-label anchors
/// (both modalities) excluding itself; anchors with no positives
/// contribute zero. Rows must be valid (unpadded) utterances only.
pub fn contrastive_loss<'g>(
    m_s: Value<'g>,
    m_t: Value<'g>,
    labels: &[usize],
    tau: f64,
) -> Result<Value<'g>, LossError> {
    let n = m_s.shape()[0];
    assert_eq!(m_t.shape()[0], n, "modality row counts differ");
    assert_eq!(labels.len(), n, "labels length != rows");
    assert!(tau > 0.0, "tau must be positive");
    let g = m_s.graph();

    let stacked = concat(&[m_s, m_t], 0);
    let values = stacked.tensor();
    for row in 0..2 * n {
        let norm_sq: f64 = values.row(row).iter().map(|x| x * x).sum();
        if norm_sq == 0.0 {
            return Err(LossError::ZeroNormRow(row));
        }
    }
    let z = nn::l2_normalize_rows(stacked);
    let sim = z.matmul(z.t()).scale(1.0 / tau);

    let m = 2 * n;
    let mut diag = crate::tensor::Tensor::zeros(vec![m, m]);
    for i in 0..m {
        diag.set2(i, i, nn::MASK_BIAS);
    }
    // log denominator per anchor: log sum_{q != a} exp(s_aq), computed as
    // a max-shifted log-sum-exp. The shift is a constant column of the
    // current row maxima; its contribution to the gradient cancels
    // exactly, and single-positive anchors reduce to an exact zero.
    let masked = sim.add(g.constant(diag));
    let row_max = {
        let t = masked.tensor();
        let mut maxima = crate::tensor::Tensor::zeros(vec![m, 1]);
        for i in 0..m {
            let mx = t.row(i).iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            maxima.set2(i, 0, mx);
        }
        g.constant(maxima)
    };
    let log_den = masked.sub(row_max).exp().sum_last_keep().log().add(row_max);

    let ext_labels: Vec<usize> = labels.iter().chain(labels.iter()).copied().collect();
    let mut positives = crate::tensor::Tensor::zeros(vec![m, m]);
    let mut inv_count = crate::tensor::Tensor::zeros(vec![m, 1]);
    let mut has_positive = crate::tensor::Tensor::zeros(vec![m, 1]);
    for a in 0..m {
        let mut count = 0.0;
        for q in 0..m {
            if q != a && ext_labels[q] == ext_labels[a] {
                positives.set2(a, q, 1.0);
                count += 1.0;
            }
        }
        if count > 0.0 {
            inv_count.set2(a, 0, 1.0 / count);
            has_positive.set2(a, 0, 1.0);
        }
    }

    let pos_sum = sim.mul(g.constant(positives)).sum_last_keep();
    let den_term = log_den.mul(g.constant(has_positive)).sum_all();
    let pos_term = pos_sum.mul(g.constant(inv_count)).sum_all();
    Ok(den_term.sub(pos_term))
}

/// Directional KL consistency summed over valid utterances:
/// `sum_k KL(p_m || p_s) + KL(p_m || p_t)` on probability rows, with both
/// arguments floored before their logs. Gradients flow through all three
/// distributions.
pub fn kl_consistency<'g>(
    p_m: Value<'g>,
    p_s: Value<'g>,
    p_t: Value<'g>,
    mask: Option<&[bool]>,
) -> Value<'g> {
    let g = p_m.graph();
    let kl_rows = |p: Value<'g>, q: Value<'g>| -> Value<'g> {
        let log_ratio = p.clamp_min(PROB_FLOOR).log().sub(q.clamp_min(PROB_FLOOR).log());
        p.mul(log_ratio).sum_last_keep()
    };
    let mut rows = kl_rows(p_m, p_s).add(kl_rows(p_m, p_t));
    if let Some(mask) = mask {
        rows = rows.mul(nn::mask_column(g, mask));
    }
    rows.sum_all()
}

/// Every component of the full architecture's objective for one
/// conversation, as graph values.
pub struct TotalLoss<'g> {
    pub can: Value<'g>,
    pub multi: Value<'g>,
    pub con: Value<'g>,
    pub kl: Value<'g>,
    pub moe: Value<'g>,
    pub total: Value<'g>,
}

impl<'g> TotalLoss<'g> {
    pub fn breakdown(&self) -> LossBreakdown {
        LossBreakdown {
            can: self.can.item(),
            multi: self.multi.item(),
            con: self.con.item(),
            kl: self.kl.item(),
            moe: self.moe.item(),
            total: self.total.item(),
        }
    }
}

/// The full objective for one conversation:
/// `L_can = FL(y_s) + FL(y_t)`, `L_multi = FL(y_m) + lambda * L_con`,
/// `L_moe = FL(fused) + alpha * L_kl`, `total = L_can + L_multi + L_moe`.
#[allow(clippy::too_many_arguments)]
pub fn total_loss<'g>(
    logits_speech: Value<'g>,
    logits_text: Value<'g>,
    logits_multi: Value<'g>,
    fused: Value<'g>,
    m_s: Value<'g>,
    m_t: Value<'g>,
    labels: &[usize],
    cfg: &LossConfig,
    mask: &[bool],
) -> Result<TotalLoss<'g>, LossError> {
    let n_valid = mask.iter().filter(|&&m| m).count();
    debug_assert!(mask.iter().take(n_valid).all(|&m| m), "padding must be a suffix");

    let fl_s = focal_loss(logits_speech, labels, cfg.gamma, Some(mask));
    let fl_t = focal_loss(logits_text, labels, cfg.gamma, Some(mask));
    let can = fl_s.add(fl_t);

    let con = contrastive_loss(
        m_s.slice_rows(0, n_valid),
        m_t.slice_rows(0, n_valid),
        &labels[..n_valid],
        cfg.tau,
    )?;
    let fl_m = focal_loss(logits_multi, labels, cfg.gamma, Some(mask));
    let multi = fl_m.add(con.scale(cfg.lambda));

    let kl = kl_consistency(logits_multi.softmax(), logits_speech.softmax(), logits_text.softmax(), Some(mask));
    let fl_fused = focal_loss(fused, labels, cfg.gamma, Some(mask));
    let moe = fl_fused.add(kl.scale(cfg.alpha));

    let total = can.add(multi).add(moe);
    Ok(TotalLoss { can, multi, con, kl, moe, total })
}

/// Per-conversation loss components for any variant. Component values are
/// zero scalars where a variant removes the corresponding term.
pub fn variant_loss<'g>(
    fwd: &Forward<'g>,
    variant: Variant,
    labels: &[usize],
    mask: &[bool],
    cfg: &LossConfig,
) -> Result<TotalLoss<'g>, LossError> {
    let g = fwd.fused.graph();
    let zero = || g.constant(crate::tensor::Tensor::scalar(0.0));
    let n_valid = mask.iter().filter(|&&m| m).count();

    match variant {
        Variant::Full => total_loss(
            fwd.logits_speech.expect("full forward has speech logits"),
            fwd.logits_text.expect("full forward has text logits"),
            fwd.logits_multi.expect("full forward has multimodal logits"),
            fwd.fused,
            fwd.m_s.expect("full forward has m_s"),
            fwd.m_t.expect("full forward has m_t"),
            labels,
            cfg,
            mask,
        ),
        Variant::NoLossMoe => {
            // Supervision on the gated prediction only.
            let moe = focal_loss(fwd.fused, labels, cfg.gamma, Some(mask));
            Ok(TotalLoss { can: zero(), multi: zero(), con: zero(), kl: zero(), moe, total: moe })
        }
        Variant::FeatMoe => {
            let con = contrastive_loss(
                fwd.m_s.expect("feat_moe has m_s").slice_rows(0, n_valid),
                fwd.m_t.expect("feat_moe has m_t").slice_rows(0, n_valid),
                &labels[..n_valid],
                cfg.tau,
            )?;
            let multi = con.scale(cfg.lambda);
            let moe = focal_loss(fwd.fused, labels, cfg.gamma, Some(mask));
            let total = multi.add(moe);
            Ok(TotalLoss { can: zero(), multi, con, kl: zero(), moe, total })
        }
        Variant::Monolithic => {
            let con = contrastive_loss(
                fwd.m_s.expect("monolithic has m_s").slice_rows(0, n_valid),
                fwd.m_t.expect("monolithic has m_t").slice_rows(0, n_valid),
                &labels[..n_valid],
                cfg.tau,
            )?;
            let fl = focal_loss(fwd.fused, labels, cfg.gamma, Some(mask));
            let multi = fl.add(con.scale(cfg.lambda));
            Ok(TotalLoss { can: zero(), multi, con, kl: zero(), moe: zero(), total: multi })
        }
        Variant::TextOnly | Variant::SpeechOnly => {
            let can = focal_loss(fwd.fused, labels, cfg.gamma, Some(mask));
            Ok(TotalLoss { can, multi: zero(), con: zero(), kl: zero(), moe: zero(), total: can })
        }
    }
}
