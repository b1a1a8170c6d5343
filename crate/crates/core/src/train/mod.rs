//! End-to-end optimization of the experts and the gate, plus evaluation.
//!
//! One training run is a pure function of `(datasets, TrainConfig)`:
//! shuffling, dropout, and initialization all flow from the configured
//! seed, so identical configs produce bit-identical logs and checkpoints.

mod adam;
mod gradcheck;

pub use adam::{clip_global_norm, AdamState};
pub use gradcheck::{compare_grads, grad_check, GradCheckReport, ABS_SWITCH, ABS_TOL, FD_STEP, REL_TOL};

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{DataError, Dataset};
use crate::graph::Graph;
use crate::loss::{variant_loss, LossBreakdown, LossConfig, LossError};
use crate::metrics::{weighted_f1, GateRecord, MetricsError};
use crate::model::{argmax_predictions, Model, ModelError, Variant};
use crate::params::ParamError;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Param(#[from] ParamError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("training diverged (non-finite loss) at epoch {epoch}; last stable checkpoint retained")]
    Diverged { epoch: usize },
    #[error("invalid train config: {0}")]
    Config(String),
}

fn default_lr() -> f64 {
    1e-5
}
fn default_batch() -> usize {
    8
}
fn default_epochs() -> usize {
    100
}
fn default_clip() -> f64 {
    1.0
}
fn default_variant() -> Variant {
    Variant::Full
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub clip_norm: f64,
    pub seed: u64,
    pub variant: Variant,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: default_lr(),
            batch_size: default_batch(),
            epochs: default_epochs(),
            clip_norm: default_clip(),
            seed: 0,
            variant: default_variant(),
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.learning_rate <= 0.0 {
            return Err(TrainError::Config("learning_rate must be > 0".into()));
        }
        if self.clip_norm <= 0.0 {
            return Err(TrainError::Config("clip_norm must be > 0".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be >= 1".into()));
        }
        self.loss.validate()?;
        Ok(())
    }
}

/// One line of the training log.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    #[serde(flatten)]
    pub losses: LossBreakdown,
    pub val_f1: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainReport {
    pub history: Vec<EpochRecord>,
    /// Epoch with the highest validation weighted F1 (earliest on ties).
    pub best_epoch: Option<usize>,
    pub best_val_f1: Option<f64>,
    pub checkpoint_path: Option<PathBuf>,
    pub wall_seconds: f64,
}

/// Trains the model under its variant's objective; on return the model
/// holds the parameters of the best validation epoch. When `out_dir` is
/// given, `best.ckpt`, `optimizer.bin`, and `train_log.jsonl` are written
/// there.
pub fn train(
    model: &mut Model,
    train_data: &Dataset,
    val_data: &Dataset,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainReport, TrainError> {
    cfg.validate()?;
    if train_data.conversations.is_empty() || val_data.conversations.is_empty() {
        return Err(TrainError::Config("train and val splits must be nonempty".into()));
    }
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::new();
    let mut log: Option<BufWriter<File>> = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            Some(BufWriter::new(File::create(dir.join("train_log.jsonl"))?))
        }
        None => None,
    };

    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, crate::params::ParameterSet)> = None;
    let checkpoint_path = out_dir.map(|d| d.join("best.ckpt"));

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train_data.conversations.len()).collect();
        order.shuffle(&mut rng);

        let mut sums = LossBreakdown::default();
        let mut conversations_seen = 0usize;
        for batch in train_data.batches(&order, cfg.batch_size) {
            let graph_seed = rng.next_u64();
            let g = Graph::new(graph_seed);
            g.set_training(true);
            let bound = model.params.bind(&g);

            let mut acc: Option<[crate::graph::Value; 6]> = None;
            for item in &batch.items {
                let fwd = model.forward(&bound, &g, item)?;
                let t = variant_loss(&fwd, model.variant, &item.labels, &item.mask, &cfg.loss)?;
                let parts = [t.can, t.multi, t.con, t.kl, t.moe, t.total];
                acc = Some(match acc {
                    Some(prev) => {
                        [
                            prev[0].add(parts[0]),
                            prev[1].add(parts[1]),
                            prev[2].add(parts[2]),
                            prev[3].add(parts[3]),
                            prev[4].add(parts[4]),
                            prev[5].add(parts[5]),
                        ]
                    }
                    None => parts,
                });
            }
            let acc = acc.expect("batches are nonempty");
            let scale = 1.0 / batch.items.len() as f64;
            let total = acc[5].scale(scale);

            if g.check_finite().is_err() || !total.item().is_finite() {
                return Err(TrainError::Diverged { epoch });
            }
            total.backward().map_err(LossError::Graph)?;

            let mut grads = bound.grads();
            clip_global_norm(&mut grads, cfg.clip_norm);
            adam.step(&mut model.params, &grads, cfg.learning_rate);

            sums.can += acc[0].item();
            sums.multi += acc[1].item();
            sums.con += acc[2].item();
            sums.kl += acc[3].item();
            sums.moe += acc[4].item();
            sums.total += acc[5].item();
            conversations_seen += batch.items.len();
        }

        let p = conversations_seen as f64;
        let losses = LossBreakdown {
            can: sums.can / p,
            multi: sums.multi / p,
            con: sums.con / p,
            kl: sums.kl / p,
            moe: sums.moe / p,
            total: sums.total / p,
        };

        let val = evaluate(model, val_data, cfg.batch_size)?;
        let record = EpochRecord { epoch, losses, val_f1: val.weighted_f1 };
        if let Some(log) = log.as_mut() {
            serde_json::to_writer(&mut *log, &record).map_err(std::io::Error::other)?;
            log.write_all(b"\n")?;
            log.flush()?;
        }
        history.push(record);

        let improved = best.as_ref().map(|(f1, _, _)| val.weighted_f1 > *f1).unwrap_or(true);
        if improved {
            best = Some((val.weighted_f1, epoch, model.params.clone()));
            if let Some(path) = &checkpoint_path {
                model.params.save(path)?;
            }
        }
    }

    if let Some(dir) = out_dir {
        if cfg.epochs > 0 {
            adam.save(&dir.join("optimizer.bin"))?;
        }
    }

    let (best_epoch, best_val_f1) = match best {
        Some((f1, epoch, params)) => {
            model.params = params;
            (Some(epoch), Some(f1))
        }
        None => (None, None),
    };
    Ok(TrainReport {
        history,
        best_epoch,
        best_val_f1,
        checkpoint_path: if best_epoch.is_some() { checkpoint_path } else { None },
        wall_seconds: started.elapsed().as_secs_f64(),
    })
}

/// Evaluation results over a split, in conversation order.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub labels: Vec<usize>,
    pub predictions: Vec<usize>,
    pub weighted_f1: f64,
    /// One record per valid utterance, for gated variants.
    pub gate_records: Vec<GateRecord>,
    /// Standalone weighted F1 of (speech, text, multimodal) experts, for
    /// variants that expose per-expert logits.
    pub expert_f1: Option<[f64; 3]>,
}

/// Runs the model in evaluation mode (dropout off) over a whole split.
pub fn evaluate(model: &Model, data: &Dataset, batch_size: usize) -> Result<Evaluation, TrainError> {
    let mut labels = Vec::new();
    let mut predictions = Vec::new();
    let mut gate_records = Vec::new();
    let mut expert_preds: Option<[Vec<usize>; 3]> = None;

    for batch in data.all_batches(batch_size) {
        let g = Graph::new(0);
        let bound = model.params.bind(&g);
        for item in &batch.items {
            let fwd = model.forward(&bound, &g, item)?;
            g.check_finite().map_err(LossError::Graph)?;
            let fused = fwd.fused.tensor();
            let preds = argmax_predictions(&fused, &item.mask);
            let valid_labels = &item.labels[..item.n_valid];

            if let Some(beta) = fwd.beta {
                let beta = beta.tensor();
                for k in 0..item.n_valid {
                    gate_records.push(GateRecord {
                        conversation_id: item.id.clone(),
                        utterance_index: k,
                        beta_s: beta.get2(k, 0),
                        beta_t: beta.get2(k, 1),
                        beta_m: beta.get2(k, 2),
                        label: valid_labels[k],
                        prediction: preds[k],
                    });
                }
            }
            if let (Some(ls), Some(lt), Some(lm)) = (fwd.logits_speech, fwd.logits_text, fwd.logits_multi) {
                let per_expert = expert_preds.get_or_insert_with(|| [Vec::new(), Vec::new(), Vec::new()]);
                for (slot, logits) in per_expert.iter_mut().zip([ls, lt, lm]) {
                    slot.extend(argmax_predictions(&logits.tensor(), &item.mask));
                }
            }

            labels.extend_from_slice(valid_labels);
            predictions.extend(preds);
        }
    }

    let score = weighted_f1(&labels, &predictions, data.class_count)?;
    let expert_f1 = match expert_preds {
        Some(per_expert) => {
            let mut f1s = [0.0; 3];
            for (slot, preds) in f1s.iter_mut().zip(per_expert.iter()) {
                *slot = weighted_f1(&labels, preds, data.class_count)?;
            }
            Some(f1s)
        }
        None => None,
    };
    Ok(Evaluation { labels, predictions, weighted_f1: score, gate_records, expert_f1 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{generate, SplitSizes, SynthConfig};
    use crate::model::{build_variant, Variant};
    use crate::model::can::CanConfig;
    use crate::model::fusion::FusionConfig;

    pub(crate) fn tiny_model(variant: Variant, seed: u64) -> Model {
        let can = CanConfig {
            input_dim: 6,
            tin_channels_per_kernel: 4,
            gru_hidden: 4,
            gru_layers: 1,
            fc_dropout: 0.2,
            class_count: 3,
        };
        let fusion = FusionConfig { model_dim: 4, heads: 2, layers: 1, dropout: 0.5, class_count: 3 };
        build_variant(variant, &can, &can, &fusion, seed).unwrap()
    }

    fn tiny_data(seed: u64) -> (Dataset, Dataset, Dataset) {
        let cfg = SynthConfig {
            class_count: 3,
            d_s: 6,
            d_t: 6,
            conversations_per_split: SplitSizes { train: 4, val: 2, test: 2 },
            utterance_count_range: (2, 4),
            speech_snr: 3.0,
            text_snr: 3.0,
            class_priors: vec![1.0 / 3.0; 3],
            emotion_shift_prob: 0.3,
            seed,
        };
        generate(&cfg).unwrap()
    }

    #[test]
    fn zero_epochs_yields_empty_report() {
        let mut model = tiny_model(Variant::Full, 0);
        let (train_data, val_data, _) = tiny_data(1);
        let cfg = TrainConfig { epochs: 0, ..TrainConfig::default() };
        let dir = tempfile::tempdir().unwrap();
        let report = train(&mut model, &train_data, &val_data, &cfg, Some(dir.path())).unwrap();
        assert!(report.history.is_empty());
        assert!(report.best_epoch.is_none());
        assert!(report.checkpoint_path.is_none());
        assert!(!dir.path().join("best.ckpt").exists());
    }

    #[test]
    fn identical_seeds_give_identical_runs() {
        let (train_data, val_data, _) = tiny_data(2);
        let cfg = TrainConfig {
            learning_rate: 1e-3,
            epochs: 2,
            batch_size: 2,
            seed: 7,
            ..TrainConfig::default()
        };

        let run = |dir: &Path| -> (String, Vec<u8>) {
            let mut model = tiny_model(Variant::Full, 11);
            train(&mut model, &train_data, &val_data, &cfg, Some(dir)).unwrap();
            let log = std::fs::read_to_string(dir.join("train_log.jsonl")).unwrap();
            let ckpt = std::fs::read(dir.join("best.ckpt")).unwrap();
            (log, ckpt)
        };
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let (log1, ckpt1) = run(d1.path());
        let (log2, ckpt2) = run(d2.path());
        assert_eq!(log1, log2, "training logs differ between identical runs");
        assert_eq!(ckpt1, ckpt2, "checkpoints differ between identical runs");
    }

    #[test]
    fn non_finite_parameters_abort_as_divergence() {
        let mut model = tiny_model(Variant::Full, 3);
        let name = model.params.names().next().unwrap().clone();
        model.params.get_mut(&name).unwrap().data_mut()[0] = f64::NAN;
        let (train_data, val_data, _) = tiny_data(3);
        let cfg = TrainConfig { epochs: 1, ..TrainConfig::default() };
        match train(&mut model, &train_data, &val_data, &cfg, None) {
            Err(TrainError::Diverged { epoch: 0 }) => {}
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn every_variant_trains_one_epoch() {
        let (train_data, val_data, _) = tiny_data(4);
        for variant in Variant::ALL {
            let mut model = tiny_model(variant, 5);
            let cfg = TrainConfig { epochs: 1, learning_rate: 1e-3, ..TrainConfig::default() };
            let report = train(&mut model, &train_data, &val_data, &cfg, None)
                .unwrap_or_else(|e| panic!("variant {variant} failed: {e}"));
            assert_eq!(report.history.len(), 1);
            let b = report.history[0].losses;
            assert!(b.total.is_finite());
            assert!((b.total - (b.can + b.multi + b.moe)).abs() < 1e-9, "variant {variant}");
            if variant == Variant::NoLossMoe {
                assert_eq!(b.can, 0.0);
                assert_eq!(b.multi, 0.0);
                assert_eq!(b.con, 0.0);
                assert_eq!(b.kl, 0.0);
                assert!(b.moe > 0.0);
            }
        }
    }

    #[test]
    fn best_epoch_ties_resolve_earliest() {
        // With zero learning rate the model never changes, so every epoch
        // scores the same validation F1; the first must win.
        let mut model = tiny_model(Variant::TextOnly, 6);
        let (train_data, val_data, _) = tiny_data(5);
        let cfg = TrainConfig { learning_rate: 1e-30, epochs: 3, ..TrainConfig::default() };
        let report = train(&mut model, &train_data, &val_data, &cfg, None).unwrap();
        assert_eq!(report.best_epoch, Some(0));
    }

    #[test]
    fn evaluation_counts_every_valid_utterance() {
        let model = tiny_model(Variant::Full, 8);
        let (_, _, test_data) = tiny_data(6);
        let eval = evaluate(&model, &test_data, 2).unwrap();
        assert_eq!(eval.labels.len(), test_data.utterance_count());
        assert_eq!(eval.predictions.len(), eval.labels.len());
        assert_eq!(eval.gate_records.len(), eval.labels.len());
        assert!(eval.expert_f1.is_some());
        for rec in &eval.gate_records {
            let sum = rec.beta_s + rec.beta_t + rec.beta_m;
            assert!((sum - 1.0).abs() < 1e-6);
        }
    }
}
