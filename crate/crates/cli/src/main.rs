//! `moerc` — train and dissect mixture-of-experts emotion recognizers on
//! conversation embeddings.
//!
//! Exit codes: 0 success, 1 usage/config error, 2 numerical failure
//! (training divergence or a failed gradient check).

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use moerc_core::data::{DataError, Split};
use moerc_core::loss::LossError;
use moerc_core::model::ModelError;
use moerc_core::train::TrainError;

use config::RunConfig;

#[derive(Debug)]
pub enum CliError {
    /// Bad usage, bad configuration, missing files: exit code 1.
    Config(String),
    /// NaN divergence or failed gradient check: exit code 2.
    Numerical(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(msg) => write!(f, "{msg}"),
            CliError::Numerical(msg) => write!(f, "{msg}"),
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<moerc_core::metrics::MetricsError> for CliError {
    fn from(e: moerc_core::metrics::MetricsError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match &e {
            TrainError::Diverged { .. } => CliError::Numerical(e.to_string()),
            TrainError::Loss(LossError::Graph(_)) => CliError::Numerical(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

#[derive(Args, Debug)]
struct Common {
    /// Path to the run configuration JSON.
    #[arg(long)]
    config: PathBuf,
    /// Dotted-path overrides, e.g. `train.seed=7`; flags win over file
    /// values.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
    overrides: Vec<String>,
}

#[derive(Parser, Debug)]
#[command(name = "moerc", version, about = "Mixture-of-experts emotion recognition over conversation embeddings")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate synthetic train/val/test JSONL datasets plus sidecars.
    GenData(Common),
    /// Train a variant; writes checkpoint, logs, report, and test metrics.
    Train(Common),
    /// Evaluate a checkpoint on one split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Run a sweep manifest of (variant, gamma, lambda, alpha, tau, seed)
    /// grid points and emit a CSV table.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Export per-utterance gate weights and gate statistics.
    Gates {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Compare analytic gradients against finite differences on a tiny
    /// configuration.
    Gradcheck(Common),
}

fn parse_split(name: &str) -> Result<Split, CliError> {
    match name {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        other => Err(CliError::Config(format!("unknown split \"{other}\" (expected train|val|test)"))),
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenData(common) => {
            let (cfg, run_id) = RunConfig::load(&common.config, &common.overrides)?;
            commands::gen_data(&cfg, &run_id)
        }
        Command::Train(common) => {
            let (cfg, run_id) = RunConfig::load(&common.config, &common.overrides)?;
            commands::cmd_train(&cfg, &run_id)
        }
        Command::Eval { common, checkpoint, split } => {
            let (cfg, run_id) = RunConfig::load(&common.config, &common.overrides)?;
            commands::cmd_eval(&cfg, &run_id, &checkpoint, parse_split(&split)?)
        }
        Command::Ablate { common, manifest } => {
            let (cfg, run_id) = RunConfig::load(&common.config, &common.overrides)?;
            commands::cmd_ablate(&cfg, &run_id, &manifest)
        }
        Command::Gates { common, checkpoint, split } => {
            let (cfg, run_id) = RunConfig::load(&common.config, &common.overrides)?;
            commands::cmd_gates(&cfg, &run_id, &checkpoint, parse_split(&split)?)
        }
        Command::Gradcheck(common) => {
            let (cfg, _) = RunConfig::load(&common.config, &common.overrides)?;
            commands::cmd_gradcheck(&cfg)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Numerical(msg)) => {
            eprintln!("numerical failure: {msg}");
            ExitCode::from(2)
        }
    }
}
