//! Run configuration: a single JSON document with `data`, `model`,
//! `train`, `loss`, and `output_dir` sections, plus dotted-path command
//! line overrides (`train.seed=7`). Unknown keys are rejected everywhere.
//!
//! Every run lands under `<output_dir>/<run-id>/`, where the run id is a
//! content hash of the fully resolved configuration, so identical configs
//! map to identical artifact locations.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use moerc_core::data::{load_jsonl, Dataset, Split, SynthConfig};
use moerc_core::loss::LossConfig;
use moerc_core::model::can::CanConfig;
use moerc_core::model::fusion::FusionConfig;
use moerc_core::model::Variant;
use moerc_core::train::TrainConfig;

use crate::CliError;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub loss: LossConfig,
    pub output_dir: PathBuf,
}

/// Either a synthetic generator spec or paths to exported JSONL datasets.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "snake_case")]
pub enum DataSection {
    Synth(SynthConfig),
    Paths(DataPaths),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataPaths {
    pub train: PathBuf,
    pub val: PathBuf,
    pub test: PathBuf,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub can: CanSection,
    pub fusion: FusionSection,
}

/// Context-network hyperparameters; input width and class count come from
/// the data section.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CanSection {
    /// Channels per inception branch; defaults to the embedding width.
    pub tin_channels_per_kernel: Option<usize>,
    pub gru_hidden: usize,
    pub gru_layers: usize,
    pub fc_dropout: f64,
}

impl Default for CanSection {
    fn default() -> Self {
        CanSection { tin_channels_per_kernel: None, gru_hidden: 512, gru_layers: 3, fc_dropout: 0.2 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionSection {
    pub model_dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub dropout: f64,
}

impl Default for FusionSection {
    fn default() -> Self {
        FusionSection { model_dim: 120, heads: 4, layers: 4, dropout: 0.5 }
    }
}

/// Training hyperparameters; the loss section is spliced in separately.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub clip_norm: f64,
    pub seed: u64,
    pub variant: Variant,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            learning_rate: t.learning_rate,
            batch_size: t.batch_size,
            epochs: t.epochs,
            clip_norm: t.clip_norm,
            seed: t.seed,
            variant: t.variant,
        }
    }
}

impl RunConfig {
    /// Loads a config file and applies `key.path=value` overrides (values
    /// parse as JSON, falling back to bare strings). Flags win over file
    /// values; unknown keys are rejected after merging.
    pub fn load(path: &Path, overrides: &[String]) -> Result<(Self, String), CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut value: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;

        for spec in overrides {
            apply_override(&mut value, spec)?;
        }

        let resolved: RunConfig = serde_json::from_value(value.clone())
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        resolved.validate()?;

        // Content hash of the canonical (key-sorted) resolved document.
        let canonical = serde_json::to_string(&value).expect("serializable value");
        let digest = Sha256::digest(canonical.as_bytes());
        let run_id: String = digest.iter().take(6).map(|b| format!("{b:02x}")).collect();
        Ok((resolved, run_id))
    }

    fn validate(&self) -> Result<(), CliError> {
        if let DataSection::Paths(paths) = &self.data {
            for (name, p) in [("train", &paths.train), ("val", &paths.val), ("test", &paths.test)] {
                if !p.exists() {
                    return Err(CliError::Config(format!("{name} dataset {} does not exist", p.display())));
                }
            }
        }
        if let DataSection::Synth(synth) = &self.data {
            synth.validate().map_err(|e| CliError::Config(e.to_string()))?;
        }
        Ok(())
    }

    /// Materializes the three splits, either by generation or ingestion.
    pub fn datasets(&self) -> Result<(Dataset, Dataset, Dataset), CliError> {
        match &self.data {
            DataSection::Synth(cfg) => moerc_core::data::generate(cfg).map_err(CliError::from),
            DataSection::Paths(paths) => {
                let train = load_jsonl(&paths.train, Split::Train)?;
                let val = load_jsonl(&paths.val, Split::Val)?;
                let test = load_jsonl(&paths.test, Split::Test)?;
                if val.class_count != train.class_count || test.class_count != train.class_count {
                    return Err(CliError::Config("splits disagree on class_count".into()));
                }
                Ok((train, val, test))
            }
        }
    }

    /// Concrete expert configs for datasets of the given shape.
    pub fn model_configs(&self, d_s: usize, d_t: usize, class_count: usize) -> (CanConfig, CanConfig, FusionConfig) {
        let can = |input_dim: usize| CanConfig {
            input_dim,
            tin_channels_per_kernel: self.model.can.tin_channels_per_kernel.unwrap_or(input_dim),
            gru_hidden: self.model.can.gru_hidden,
            gru_layers: self.model.can.gru_layers,
            fc_dropout: self.model.can.fc_dropout,
            class_count,
        };
        let fusion = FusionConfig {
            model_dim: self.model.fusion.model_dim,
            heads: self.model.fusion.heads,
            layers: self.model.fusion.layers,
            dropout: self.model.fusion.dropout,
            class_count,
        };
        (can(d_s), can(d_t), fusion)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.train.learning_rate,
            batch_size: self.train.batch_size,
            epochs: self.train.epochs,
            clip_norm: self.train.clip_norm,
            seed: self.train.seed,
            variant: self.train.variant,
            loss: self.loss,
        }
    }

    pub fn run_dir(&self, run_id: &str) -> PathBuf {
        self.output_dir.join(run_id)
    }
}

/// Sets `a.b.c=value` inside a JSON document, creating intermediate
/// objects as needed; the typed parse afterwards rejects unknown keys.
fn apply_override(value: &mut serde_json::Value, spec: &str) -> Result<(), CliError> {
    let spec = spec.strip_prefix("--").unwrap_or(spec);
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override \"{spec}\" is not key.path=value")))?;
    let parsed: serde_json::Value =
        serde_json::from_str(raw).unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));

    let mut node = value;
    let segments: Vec<&str> = path.split('.').collect();
    for (i, seg) in segments.iter().enumerate() {
        if seg.is_empty() {
            return Err(CliError::Config(format!("override \"{spec}\" has an empty path segment")));
        }
        let obj = node
            .as_object_mut()
            .ok_or_else(|| CliError::Config(format!("override path \"{path}\" crosses a non-object")))?;
        if i + 1 == segments.len() {
            obj.insert(seg.to_string(), parsed);
            return Ok(());
        }
        node = obj.entry(seg.to_string()).or_insert_with(|| serde_json::json!({}));
    }
    unreachable!("override paths have at least one segment")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_config(dir: &Path, body: &str) -> PathBuf {
        let path = dir.join("run.json");
        std::fs::write(&path, body).unwrap();
        path
    }

    fn minimal(dir: &Path) -> String {
        format!(
            r#"{{
  "data": {{"synth": {{
    "class_count": 3, "d_s": 8, "d_t": 8,
    "conversations_per_split": {{"train": 4, "val": 2, "test": 2}},
    "utterance_count_range": [2, 4],
    "speech_snr": 2.0, "text_snr": 2.0,
    "class_priors": [0.34, 0.33, 0.33],
    "emotion_shift_prob": 0.3, "seed": 5
  }}}},
  "output_dir": "{}"
}}"#,
            dir.display()
        )
    }

    #[test]
    fn defaults_fill_missing_sections() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_config(dir.path(), &minimal(dir.path()));
        let (cfg, run_id) = RunConfig::load(&path, &[]).unwrap();
        assert_eq!(cfg.model.can.gru_hidden, 512);
        assert_eq!(cfg.model.fusion.model_dim, 120);
        assert_eq!(cfg.train.epochs, 100);
        assert_eq!(cfg.loss.gamma, 3.0);
        assert_eq!(run_id.len(), 12);
    }

    #[test]
    fn plain_priors_must_sum_to_one() {
        let dir = tempfile::tempdir().unwrap();
        let body = minimal(dir.path()).replace("[0.34, 0.33, 0.33]", "[0.5, 0.4, 0.3]");
        let path = write_config(dir.path(), &body);
        assert!(RunConfig::load(&path, &[]).is_err());
    }

    #[test]
    fn unknown_keys_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let body = minimal(dir.path()).replace("\"output_dir\"", "\"bogus\": 1, \"output_dir\"");
        let path = write_config(dir.path(), &body);
        let err = RunConfig::load(&path, &[]).unwrap_err();
        assert!(matches!(err, CliError::Config(_)));
    }

    #[test]
    fn overrides_win_and_change_run_id() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_config(dir.path(), &minimal(dir.path()));
        let (base, id_base) = RunConfig::load(&path, &[]).unwrap();
        assert_eq!(base.train.seed, 0);
        let (over, id_over) =
            RunConfig::load(&path, &["train.seed=7".into(), "--model.fusion.heads=2".into()]).unwrap();
        assert_eq!(over.train.seed, 7);
        assert_eq!(over.model.fusion.heads, 2);
        assert_ne!(id_base, id_over);

        // Identical overrides reproduce the identical run id.
        let (_, id_again) =
            RunConfig::load(&path, &["train.seed=7".into(), "model.fusion.heads=2".into()]).unwrap();
        assert_eq!(id_over, id_again);
    }

    #[test]
    fn override_with_unknown_key_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_config(dir.path(), &minimal(dir.path()));
        assert!(RunConfig::load(&path, &["train.bogus=1".into()]).is_err());
    }

    #[test]
    fn missing_paths_are_config_errors() {
        let dir = tempfile::tempdir().unwrap();
        let body = format!(
            r#"{{"data": {{"paths": {{"train": "/nonexistent/a.jsonl", "val": "/nonexistent/b.jsonl", "test": "/nonexistent/c.jsonl"}}}}, "output_dir": "{}"}}"#,
            dir.path().display()
        );
        let path = write_config(dir.path(), &body);
        assert!(matches!(RunConfig::load(&path, &[]), Err(CliError::Config(_))));
    }
}
