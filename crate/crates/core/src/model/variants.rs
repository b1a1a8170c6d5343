//! Model assembly: the full architecture and its ablation variants.
//!
//! * `full` — two context-addition experts, the fusion expert, and
//!   logit-level gating.
//! * `feat_moe` — the gate consumes the concatenated pre-classifier
//!   features of the three branches; gate-weighted features feed a single
//!   classifier head instead of fusing logits.
//! * `no_loss_moe` — the full architecture, trained only on the final
//!   gated prediction (the loss module handles the difference).
//! * `monolithic` — context features flow straight into the fusion
//!   module; one head, no experts, no gate.
//! * `text_only` / `speech_only` — a single context-addition expert with
//!   focal loss; no fusion, gate, contrastive, or consistency terms.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::PaddedConversation;
use crate::graph::{concat, Graph, Value};
use crate::model::{can, fusion, gate, ModelError};
use crate::model::can::CanConfig;
use crate::model::fusion::FusionConfig;
use crate::nn;
use crate::params::{BoundParams, ParameterSet};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    FeatMoe,
    NoLossMoe,
    Monolithic,
    TextOnly,
    SpeechOnly,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Full,
        Variant::FeatMoe,
        Variant::NoLossMoe,
        Variant::Monolithic,
        Variant::TextOnly,
        Variant::SpeechOnly,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::FeatMoe => "feat_moe",
            Variant::NoLossMoe => "no_loss_moe",
            Variant::Monolithic => "monolithic",
            Variant::TextOnly => "text_only",
            Variant::SpeechOnly => "speech_only",
        }
    }

    /// Whether this variant carries the three-expert gate.
    pub fn has_gate(&self) -> bool {
        matches!(self, Variant::Full | Variant::FeatMoe | Variant::NoLossMoe)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Variant::ALL
            .iter()
            .find(|v| v.name() == s)
            .copied()
            .ok_or_else(|| ModelError::UnknownVariant(s.to_string()))
    }
}

/// A built model: variant tag, the configs it was built with, and its
/// parameters. Forward passes bind the parameters into a graph per step.
#[derive(Clone, Debug)]
pub struct Model {
    pub variant: Variant,
    pub can_speech: Option<CanConfig>,
    pub can_text: Option<CanConfig>,
    pub fusion: Option<FusionConfig>,
    pub class_count: usize,
    pub params: ParameterSet,
}

/// Builds the parameter set for `variant`; initialization is a pure
/// function of the seed.
pub fn build_variant(
    variant: Variant,
    can_speech: &CanConfig,
    can_text: &CanConfig,
    fusion_cfg: &FusionConfig,
    seed: u64,
) -> Result<Model, ModelError> {
    can_speech.validate()?;
    can_text.validate()?;
    fusion_cfg.validate()?;
    if can_speech.class_count != can_text.class_count || can_speech.class_count != fusion_cfg.class_count {
        return Err(ModelError::BadConfig("experts disagree on class_count".into()));
    }
    let class_count = fusion_cfg.class_count;
    let d_s = can_speech.input_dim;
    let d_t = can_text.input_dim;
    let dm = fusion_cfg.model_dim;

    let mut ps = ParameterSet::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = Model {
        variant,
        can_speech: None,
        can_text: None,
        fusion: None,
        class_count,
        params: ParameterSet::new(),
    };

    match variant {
        Variant::Full | Variant::NoLossMoe => {
            can::init_params(&mut ps, &mut rng, "can.speech", can_speech, true);
            can::init_params(&mut ps, &mut rng, "can.text", can_text, true);
            fusion::init_params(&mut ps, &mut rng, "fusion", fusion_cfg, d_s, d_t, true);
            gate::init_params(&mut ps, &mut rng, class_count);
            model.can_speech = Some(can_speech.clone());
            model.can_text = Some(can_text.clone());
            model.fusion = Some(fusion_cfg.clone());
        }
        Variant::FeatMoe => {
            can::init_params(&mut ps, &mut rng, "can.speech", can_speech, false);
            can::init_params(&mut ps, &mut rng, "can.text", can_text, false);
            fusion::init_params(&mut ps, &mut rng, "fusion", fusion_cfg, d_s, d_t, false);
            let feat_dim = d_s + d_t + 2 * dm;
            nn::init_linear(&mut ps, &mut rng, "gate.feat", feat_dim, 3);
            nn::init_linear(&mut ps, &mut rng, "gate.head", feat_dim, class_count);
            model.can_speech = Some(can_speech.clone());
            model.can_text = Some(can_text.clone());
            model.fusion = Some(fusion_cfg.clone());
        }
        Variant::Monolithic => {
            can::init_params(&mut ps, &mut rng, "can.speech", can_speech, false);
            can::init_params(&mut ps, &mut rng, "can.text", can_text, false);
            fusion::init_params(&mut ps, &mut rng, "fusion", fusion_cfg, d_s, d_t, true);
            model.can_speech = Some(can_speech.clone());
            model.can_text = Some(can_text.clone());
            model.fusion = Some(fusion_cfg.clone());
        }
        Variant::TextOnly => {
            can::init_params(&mut ps, &mut rng, "can.text", can_text, true);
            model.can_text = Some(can_text.clone());
        }
        Variant::SpeechOnly => {
            can::init_params(&mut ps, &mut rng, "can.speech", can_speech, true);
            model.can_speech = Some(can_speech.clone());
        }
    }
    model.params = ps;
    Ok(model)
}

/// One conversation's forward pass. Fields are present only where the
/// variant produces them; `fused` is always the final prediction logits.
pub struct Forward<'g> {
    pub logits_speech: Option<Value<'g>>,
    pub logits_text: Option<Value<'g>>,
    pub logits_multi: Option<Value<'g>>,
    /// Contrastive inputs from the fusion module.
    pub m_s: Option<Value<'g>>,
    pub m_t: Option<Value<'g>>,
    /// `[n, 3]` gate weights, for gated variants.
    pub beta: Option<Value<'g>>,
    /// `[n, class_count]` final prediction logits.
    pub fused: Value<'g>,
}

impl Model {
    /// Replaces the parameters with a loaded set, which must carry exactly
    /// the names and shapes this variant was built with.
    pub fn set_params(&mut self, params: ParameterSet) -> Result<(), ModelError> {
        if params.len() != self.params.len() {
            return Err(ModelError::BadConfig(format!(
                "checkpoint has {} parameters, model expects {}",
                params.len(),
                self.params.len()
            )));
        }
        for (name, tensor) in self.params.iter() {
            match params.get(name) {
                Some(loaded) if loaded.shape() == tensor.shape() => {}
                Some(loaded) => {
                    return Err(ModelError::BadConfig(format!(
                        "checkpoint parameter {name} has shape {:?}, expected {:?}",
                        loaded.shape(),
                        tensor.shape()
                    )));
                }
                None => {
                    return Err(ModelError::BadConfig(format!("checkpoint is missing parameter {name}")));
                }
            }
        }
        self.params = params;
        Ok(())
    }

    /// Runs the variant's graph for one (padded) conversation. Embeddings
    /// enter as frozen constants: no gradient is ever computed for them.
    pub fn forward<'g>(
        &self,
        p: &BoundParams<'g>,
        g: &'g Graph,
        item: &PaddedConversation,
    ) -> Result<Forward<'g>, ModelError> {
        let mask = &item.mask;
        let e_s = g.constant(item.speech.clone());
        let e_t = g.constant(item.text.clone());

        match self.variant {
            Variant::Full | Variant::NoLossMoe => {
                let cfg_s = self.can_speech.as_ref().expect("full variant has speech CAN");
                let cfg_t = self.can_text.as_ref().expect("full variant has text CAN");
                let fus_cfg = self.fusion.as_ref().expect("full variant has fusion");
                let out_s = can::forward(p, "can.speech", e_s, cfg_s, mask)?;
                let out_t = can::forward(p, "can.text", e_t, cfg_t, mask)?;
                let state = fusion::forward(p, "fusion", e_s, e_t, fus_cfg, mask, true)?;
                let logits_m = state.logits.expect("fusion built with head");
                let beta = gate::gate_forward(p, out_s.logits, out_t.logits, logits_m);
                let fused = gate::fuse(out_s.logits, out_t.logits, logits_m, beta);
                Ok(Forward {
                    logits_speech: Some(out_s.logits),
                    logits_text: Some(out_t.logits),
                    logits_multi: Some(logits_m),
                    m_s: Some(state.m_s),
                    m_t: Some(state.m_t),
                    beta: Some(beta),
                    fused,
                })
            }
            Variant::FeatMoe => {
                let cfg_s = self.can_speech.as_ref().expect("feat_moe has speech CAN");
                let cfg_t = self.can_text.as_ref().expect("feat_moe has text CAN");
                let fus_cfg = self.fusion.as_ref().expect("feat_moe has fusion");
                let f_s = can::context_forward(p, "can.speech", e_s, cfg_s, mask);
                let f_t = can::context_forward(p, "can.text", e_t, cfg_t, mask);
                let state = fusion::forward(p, "fusion", e_s, e_t, fus_cfg, mask, false)?;
                let features = concat(&[f_s, f_t, state.m_s, state.m_t], 1);
                let beta = nn::linear_fw(p, "gate.feat", features).softmax();
                // Scale each branch's feature block by its gate weight,
                // then classify the combined feature vector.
                let b_s = beta.slice_cols(0, 1);
                let b_t = beta.slice_cols(1, 1);
                let b_m = beta.slice_cols(2, 1);
                let weighted = concat(
                    &[f_s.mul(b_s), f_t.mul(b_t), concat(&[state.m_s, state.m_t], 1).mul(b_m)],
                    1,
                );
                let fused = nn::linear_fw(p, "gate.head", weighted);
                Ok(Forward {
                    logits_speech: None,
                    logits_text: None,
                    logits_multi: None,
                    m_s: Some(state.m_s),
                    m_t: Some(state.m_t),
                    beta: Some(beta),
                    fused,
                })
            }
            Variant::Monolithic => {
                let cfg_s = self.can_speech.as_ref().expect("monolithic has speech CAN");
                let cfg_t = self.can_text.as_ref().expect("monolithic has text CAN");
                let fus_cfg = self.fusion.as_ref().expect("monolithic has fusion");
                let f_s = can::context_forward(p, "can.speech", e_s, cfg_s, mask);
                let f_t = can::context_forward(p, "can.text", e_t, cfg_t, mask);
                let state = fusion::forward(p, "fusion", f_s, f_t, fus_cfg, mask, true)?;
                let fused = state.logits.expect("fusion built with head");
                Ok(Forward {
                    logits_speech: None,
                    logits_text: None,
                    logits_multi: None,
                    m_s: Some(state.m_s),
                    m_t: Some(state.m_t),
                    beta: None,
                    fused,
                })
            }
            Variant::TextOnly => {
                let cfg = self.can_text.as_ref().expect("text_only has text CAN");
                let out = can::forward(p, "can.text", e_t, cfg, mask)?;
                Ok(Forward {
                    logits_speech: None,
                    logits_text: None,
                    logits_multi: None,
                    m_s: None,
                    m_t: None,
                    beta: None,
                    fused: out.logits,
                })
            }
            Variant::SpeechOnly => {
                let cfg = self.can_speech.as_ref().expect("speech_only has speech CAN");
                let out = can::forward(p, "can.speech", e_s, cfg, mask)?;
                Ok(Forward {
                    logits_speech: None,
                    logits_text: None,
                    logits_multi: None,
                    m_s: None,
                    m_t: None,
                    beta: None,
                    fused: out.logits,
                })
            }
        }
    }
}

/// Argmax class per valid utterance of a fused-logit tensor.
pub fn argmax_predictions(logits: &crate::tensor::Tensor, mask: &[bool]) -> Vec<usize> {
    let mut out = Vec::new();
    for (i, &valid) in mask.iter().enumerate() {
        if !valid {
            continue;
        }
        let row = logits.row(i);
        let best = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(idx, _)| idx)
            .unwrap_or(0);
        out.push(best);
    }
    out
}
