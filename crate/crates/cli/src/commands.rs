//! Subcommand implementations. Every command resolves the config, derives
//! the run directory from the config hash, and writes its artifacts
//! there; reruns with identical inputs produce byte-identical outputs
//! (wall-clock fields in `report.json` aside).

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use moerc_core::data::{pad_conversation, save_jsonl, Dataset, Split};
use moerc_core::metrics::{gate_stats, ConfusionMatrix, MetricsReport};
use moerc_core::model::{build_variant, Model, Variant};
use moerc_core::params::ParameterSet;
use moerc_core::train::{evaluate, grad_check, train, Evaluation, TrainConfig};

use crate::config::RunConfig;
use crate::CliError;

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir)
        .map_err(|e| CliError::Config(format!("cannot create {}: {e}", dir.display())))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let file = File::create(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| CliError::Config(e.to_string()))?;
    w.write_all(b"\n").map_err(|e| CliError::Config(e.to_string()))?;
    Ok(())
}

fn build_model(cfg: &RunConfig, train_data: &Dataset, seed: u64, variant: Variant) -> Result<Model, CliError> {
    let (can_s, can_t, fusion) = cfg.model_configs(train_data.d_s, train_data.d_t, train_data.class_count);
    Ok(build_variant(variant, &can_s, &can_t, &fusion, seed)?)
}

fn write_metrics_artifacts(
    dir: &Path,
    eval: &Evaluation,
    data: &Dataset,
) -> Result<MetricsReport, CliError> {
    ensure_dir(dir)?;
    let gate_means = if eval.gate_records.is_empty() {
        None
    } else {
        Some(gate_stats(&eval.gate_records, data.class_count)?.mean_beta)
    };
    let report = MetricsReport::build(&eval.labels, &eval.predictions, data.class_count, gate_means)?;
    write_json(&dir.join("metrics.json"), &report)?;

    let cm = ConfusionMatrix::from_pairs(&eval.labels, &eval.predictions, data.class_count)?;
    let file = File::create(dir.join("confusion.csv")).map_err(|e| CliError::Config(e.to_string()))?;
    cm.to_csv(&data.class_names, BufWriter::new(file)).map_err(|e| CliError::Config(e.to_string()))?;

    if !eval.gate_records.is_empty() {
        write_gates_csv(&dir.join("gates.csv"), eval)?;
    }
    Ok(report)
}

fn write_gates_csv(path: &Path, eval: &Evaluation) -> Result<(), CliError> {
    let file = File::create(path).map_err(|e| CliError::Config(e.to_string()))?;
    let mut writer = csv::Writer::from_writer(BufWriter::new(file));
    for record in &eval.gate_records {
        writer.serialize(record).map_err(|e| CliError::Config(e.to_string()))?;
    }
    writer.flush().map_err(|e| CliError::Config(e.to_string()))?;
    Ok(())
}

fn split_dataset(splits: &(Dataset, Dataset, Dataset), split: Split) -> &Dataset {
    match split {
        Split::Train => &splits.0,
        Split::Val => &splits.1,
        Split::Test => &splits.2,
    }
}

// ---------------------------------------------------------------------------
// gen-data
// ---------------------------------------------------------------------------

pub fn gen_data(cfg: &RunConfig, run_id: &str) -> Result<(), CliError> {
    let dir = cfg.run_dir(run_id);
    ensure_dir(&dir)?;
    let (train_data, val_data, test_data) = cfg.datasets()?;
    for (name, ds) in [("train", &train_data), ("val", &val_data), ("test", &test_data)] {
        let path = dir.join(format!("{name}.jsonl"));
        save_jsonl(ds, &path)?;
        println!(
            "wrote {} ({} conversations, {} utterances)",
            path.display(),
            ds.conversations.len(),
            ds.utterance_count()
        );
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

pub fn cmd_train(cfg: &RunConfig, run_id: &str) -> Result<(), CliError> {
    let dir = cfg.run_dir(run_id);
    ensure_dir(&dir)?;
    let splits = cfg.datasets()?;
    let train_cfg = cfg.train_config();
    let mut model = build_model(cfg, &splits.0, train_cfg.seed, train_cfg.variant)?;
    println!(
        "run {run_id}: variant {} with {} parameters ({} tensors)",
        train_cfg.variant,
        model.params.num_scalars(),
        model.params.len()
    );

    let report = train(&mut model, &splits.0, &splits.1, &train_cfg, Some(&dir))?;
    write_json(&dir.join("report.json"), &report)?;

    let eval = evaluate(&model, &splits.2, train_cfg.batch_size)?;
    let metrics = write_metrics_artifacts(&dir, &eval, &splits.2)?;
    println!(
        "best epoch {:?} (val F1 {:.4}); test weighted F1 {:.4}; artifacts in {}",
        report.best_epoch,
        report.best_val_f1.unwrap_or(f64::NAN),
        metrics.weighted_f1,
        dir.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// eval / gates
// ---------------------------------------------------------------------------

fn load_model_for_checkpoint(
    cfg: &RunConfig,
    splits: &(Dataset, Dataset, Dataset),
    checkpoint: &Path,
) -> Result<Model, CliError> {
    let train_cfg = cfg.train_config();
    let mut model = build_model(cfg, &splits.0, train_cfg.seed, train_cfg.variant)?;
    let params = ParameterSet::load(checkpoint)
        .map_err(|e| CliError::Config(format!("{}: {e}", checkpoint.display())))?;
    model.set_params(params)?;
    Ok(model)
}

pub fn cmd_eval(cfg: &RunConfig, run_id: &str, checkpoint: &Path, split: Split) -> Result<(), CliError> {
    let splits = cfg.datasets()?;
    let model = load_model_for_checkpoint(cfg, &splits, checkpoint)?;
    let data = split_dataset(&splits, split);
    let eval = evaluate(&model, data, cfg.train_config().batch_size)?;
    let dir = cfg.run_dir(run_id).join(format!("eval-{}", split.name()));
    let metrics = write_metrics_artifacts(&dir, &eval, data)?;
    println!("{} weighted F1 {:.4}; metrics in {}", split.name(), metrics.weighted_f1, dir.display());
    Ok(())
}

pub fn cmd_gates(cfg: &RunConfig, run_id: &str, checkpoint: &Path, split: Split) -> Result<(), CliError> {
    let splits = cfg.datasets()?;
    let model = load_model_for_checkpoint(cfg, &splits, checkpoint)?;
    if !model.variant.has_gate() {
        return Err(CliError::Config(format!("variant {} has no gate to inspect", model.variant)));
    }
    let data = split_dataset(&splits, split);
    let eval = evaluate(&model, data, cfg.train_config().batch_size)?;
    let dir = cfg.run_dir(run_id).join(format!("gates-{}", split.name()));
    write_metrics_artifacts(&dir, &eval, data)?;
    let stats = gate_stats(&eval.gate_records, data.class_count)?;
    println!(
        "{} gate means: speech {:.3}, text {:.3}, multimodal {:.3}; {} records in {}",
        split.name(),
        stats.mean_beta[0],
        stats.mean_beta[1],
        stats.mean_beta[2],
        eval.gate_records.len(),
        dir.join("gates.csv").display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// ablate
// ---------------------------------------------------------------------------

/// One grid point of a sweep; unset fields inherit the base config.
#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SweepCell {
    variant: Option<Variant>,
    gamma: Option<f64>,
    lambda: Option<f64>,
    alpha: Option<f64>,
    tau: Option<f64>,
    seed: Option<u64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SweepManifest {
    cells: Vec<SweepCell>,
}

pub fn cmd_ablate(cfg: &RunConfig, run_id: &str, manifest_path: &Path) -> Result<(), CliError> {
    let text = std::fs::read_to_string(manifest_path)
        .map_err(|e| CliError::Config(format!("{}: {e}", manifest_path.display())))?;
    let manifest: SweepManifest =
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", manifest_path.display())))?;
    if manifest.cells.is_empty() {
        return Err(CliError::Config("sweep manifest has no cells".into()));
    }

    let dir = cfg.run_dir(run_id);
    ensure_dir(&dir)?;
    let splits = cfg.datasets()?;
    let base = cfg.train_config();

    let csv_path = dir.join("sweep.csv");
    let file = File::create(&csv_path).map_err(|e| CliError::Config(e.to_string()))?;
    let mut writer = csv::Writer::from_writer(BufWriter::new(file));
    writer
        .write_record(["variant", "gamma", "lambda", "alpha", "tau", "seed", "label", "test_weighted_f1", "status"])
        .map_err(|e| CliError::Config(e.to_string()))?;

    for (i, cell) in manifest.cells.iter().enumerate() {
        let mut train_cfg = TrainConfig {
            variant: cell.variant.unwrap_or(base.variant),
            seed: cell.seed.unwrap_or(base.seed),
            ..base.clone()
        };
        train_cfg.loss.gamma = cell.gamma.unwrap_or(base.loss.gamma);
        train_cfg.loss.lambda = cell.lambda.unwrap_or(base.loss.lambda);
        train_cfg.loss.alpha = cell.alpha.unwrap_or(base.loss.alpha);
        train_cfg.loss.tau = cell.tau.unwrap_or(base.loss.tau);
        let label = if train_cfg.loss.gamma == 0.0 {
            "cross-entropy".to_string()
        } else {
            format!("gamma={}", train_cfg.loss.gamma)
        };

        let outcome = run_cell(cfg, &splits, &train_cfg);
        let (f1_field, status) = match outcome {
            Ok(f1) => (format!("{f1}"), "ok".to_string()),
            Err(e) => (String::new(), format!("error: {e}")),
        };
        writer
            .write_record([
                train_cfg.variant.name(),
                &train_cfg.loss.gamma.to_string(),
                &train_cfg.loss.lambda.to_string(),
                &train_cfg.loss.alpha.to_string(),
                &train_cfg.loss.tau.to_string(),
                &train_cfg.seed.to_string(),
                &label,
                &f1_field,
                &status,
            ])
            .map_err(|e| CliError::Config(e.to_string()))?;
        println!("cell {}/{}: {} {} -> {}", i + 1, manifest.cells.len(), train_cfg.variant, label, status);
    }
    writer.flush().map_err(|e| CliError::Config(e.to_string()))?;
    println!("sweep table at {}", csv_path.display());
    Ok(())
}

fn run_cell(cfg: &RunConfig, splits: &(Dataset, Dataset, Dataset), train_cfg: &TrainConfig) -> Result<f64, CliError> {
    let mut model = build_model(cfg, &splits.0, train_cfg.seed, train_cfg.variant)?;
    train(&mut model, &splits.0, &splits.1, train_cfg, None)?;
    let eval = evaluate(&model, &splits.2, train_cfg.batch_size)?;
    Ok(eval.weighted_f1)
}

// ---------------------------------------------------------------------------
// gradcheck
// ---------------------------------------------------------------------------

/// Largest model width the finite-difference check will accept; central
/// differences over every scalar parameter get slow beyond this.
const GRADCHECK_DIM_LIMIT: usize = 8;

pub fn cmd_gradcheck(cfg: &RunConfig) -> Result<(), CliError> {
    let splits = cfg.datasets()?;
    let train_data = &splits.0;
    let (can_s, _, fusion) = cfg.model_configs(train_data.d_s, train_data.d_t, train_data.class_count);
    for (what, dim) in [
        ("d_s", train_data.d_s),
        ("d_t", train_data.d_t),
        ("gru_hidden", can_s.gru_hidden),
        ("tin_channels_per_kernel", can_s.tin_channels_per_kernel),
        ("model_dim", fusion.model_dim),
    ] {
        if dim > GRADCHECK_DIM_LIMIT {
            return Err(CliError::Config(format!(
                "gradcheck needs a tiny configuration: {what} = {dim} exceeds {GRADCHECK_DIM_LIMIT}"
            )));
        }
    }

    let train_cfg = cfg.train_config();
    let model = build_model(cfg, train_data, train_cfg.seed, train_cfg.variant)?;

    // Two conversations truncated to at most three utterances each.
    let mut convs = Vec::new();
    for conv in train_data.conversations.iter().take(2) {
        let mut short = conv.clone();
        short.utterances.truncate(3);
        convs.push(short);
    }
    let n_max = convs.iter().map(|c| c.len()).max().unwrap_or(1);
    let batch: Vec<_> = convs
        .iter()
        .map(|c| pad_conversation(c, train_data.d_s, train_data.d_t, n_max))
        .collect();

    let report = grad_check(&model, &batch, &train_cfg.loss, train_cfg.seed)?;
    println!(
        "checked {} scalar parameters; worst relative error {:.3e}; near-zero worst abs {:.3e}",
        report.scalars_checked,
        report.worst(),
        report.worst_small_abs
    );
    if report.passed() {
        println!("gradcheck PASS");
        Ok(())
    } else {
        for name in &report.failures {
            eprintln!("gradcheck FAIL: {name} (max rel err {:.3e})", report.max_rel_error[name]);
        }
        Err(CliError::Numerical(format!("gradient check failed for {} parameters", report.failures.len())))
    }
}
