//! `cddsa` command-line entry point.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use cddsa::trainer::TrainMode;
use cddsa::CddsaError;
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

#[derive(Parser, Debug)]
#[command(name = "cddsa", version, about = "Content/style disentangled segmentation with style augmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Clone, Debug, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    /// Render the synthetic multi-domain dataset to disk.
    GenData(GenDataArgs),
    /// Train with leave-one-domain-out (or within-domain) folds.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one domain's test split.
    Eval(EvalArgs),
    /// Write an image next to its reconstruction.
    Reconstruct(ReconstructArgs),
    /// Write an image next to style-augmented variants of it.
    Augment(AugmentArgs),
    /// Summarise the reports of one or two run directories.
    Report(ReportArgs),
    /// Re-execute the command recorded in a manifest.
    Rerun(RerunArgs),
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
pub struct GenDataArgs {
    /// Experiment TOML; only the `[data]` section is used.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Clone, Debug, Default, Serialize, Deserialize)]
pub struct Overrides {
    #[arg(long)]
    pub mode: Option<TrainMode>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub steps_per_epoch: Option<usize>,
    #[arg(long)]
    pub per_domain_batch: Option<usize>,
    #[arg(long)]
    pub lambda1: Option<f64>,
    #[arg(long)]
    pub lambda2: Option<f64>,
    #[arg(long)]
    pub lambda3: Option<f64>,
    #[arg(long)]
    pub lambda4: Option<f64>,
    #[arg(long)]
    pub tau: Option<f64>,
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    /// Run directory, e.g. `runs/<name>`.
    #[arg(long)]
    pub out: PathBuf,
    /// Domain(s) to hold out (repeatable); all domains when omitted.
    #[arg(long)]
    pub holdout: Vec<usize>,
    /// Folds trained concurrently in child processes.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    #[command(flatten)]
    pub overrides: Overrides,
    /// Set on child processes spawned by `--jobs`; skips the run manifest.
    #[arg(long, hide = true)]
    #[serde(skip)]
    pub child: bool,
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub domain: usize,
    /// Output directory for `report.csv`.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
pub struct ReconstructArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    /// Output PNG.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
pub struct AugmentArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub n: usize,
    /// Dataset whose training images form the style bank; without it styles
    /// are drawn from the unit Gaussian.
    #[arg(long)]
    pub bank: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output PNG.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
pub struct ReportArgs {
    /// Run directory containing `fold_<d>/report.csv`.
    #[arg(long)]
    pub run: PathBuf,
    /// Second run compared case by case with a Wilcoxon signed-rank test.
    #[arg(long)]
    pub compare: Option<PathBuf>,
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
pub struct RerunArgs {
    pub manifest: PathBuf,
}

/// Error with the stage it came from, which decides the exit code.
#[derive(Debug, thiserror::Error)]
pub enum Failure {
    #[error("config error: {0}")]
    Config(CddsaError),
    #[error("data error: {0}")]
    Data(CddsaError),
    #[error("{0}")]
    Run(CddsaError),
}

impl Failure {
    pub fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 2,
            Failure::Data(_) => 3,
            Failure::Run(_) => 4,
        }
    }
}

impl From<CddsaError> for Failure {
    fn from(e: CddsaError) -> Self {
        match e {
            CddsaError::Config(_) => Failure::Config(e),
            CddsaError::Ingest { .. } => Failure::Data(e),
            other => Failure::Run(other),
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code())
        }
    }
}
