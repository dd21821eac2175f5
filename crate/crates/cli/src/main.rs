mod commands;
mod config;
mod io;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Flow matching with diffusion-guided and encoder couplings on 2D data.
#[derive(Parser, Debug)]
#[command(name = "sfm", version)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// TOML run configuration; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Random seed. Falls back to the config file, then $SFM_SEED, then 0.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train the ε-prediction diffusion model used as coupling guide.
    TrainDiffusion(TrainDiffusionArgs),
    /// Train a flow-matching velocity field (baseline, I, II or III).
    TrainFm(TrainFmArgs),
    /// Generate samples from a trained velocity field.
    Sample(SampleArgs),
    /// Evaluate a trained velocity field.
    Eval(EvalArgs),
    /// Run a named acceptance experiment end to end.
    Repro(ReproArgs),
}

#[derive(Args, Debug)]
pub struct TrainDiffusionArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub dataset: Option<String>,
    #[arg(long = "iters", alias = "iterations")]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// After training, integrate the probability-flow ODE from this many
    /// noise rows and write the pairs to `<out>.couplings.csv`.
    #[arg(long)]
    pub couplings: Option<usize>,
    #[arg(long, default_value = "guide.sfmw")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct TrainFmArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub dataset: Option<String>,
    /// baseline | I | II | III
    #[arg(long)]
    pub variant: Option<String>,
    /// Diffusion weights (required for variants I, II and III).
    #[arg(long)]
    pub guide: Option<PathBuf>,
    #[arg(long = "iters", alias = "iterations")]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Fraction of each batch taken from forward couplings.
    #[arg(long)]
    pub mix: Option<f64>,
    /// Number of cached diffusion couplings; 0 integrates the guide per batch.
    #[arg(long)]
    pub cache_size: Option<usize>,
    #[arg(long, default_value = "fm.sfmw")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct SampleArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub model: PathBuf,
    /// euler | heun | rk45
    #[arg(long)]
    pub solver: Option<String>,
    /// Fixed-solver steps; ignored by rk45.
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub n: Option<usize>,
    /// Also write full paths to `<out>.traj.csv` and draw them.
    #[arg(long)]
    pub trajectories: bool,
    #[arg(long, default_value = "samples.csv")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub dataset: Option<String>,
    /// Comma-separated: straightness, w2, cost.
    #[arg(long)]
    pub metrics: Option<String>,
    /// Comma-separated Euler step counts.
    #[arg(long)]
    pub steps_list: Option<String>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long, default_value = "report.csv")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ReproArgs {
    /// Experiment name, or `all`.
    pub name: String,
    /// TOML pipeline configuration for the training experiments.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Tiny budgets: checks the plumbing, not the criteria.
    #[arg(long)]
    pub smoke: bool,
    #[arg(long)]
    pub seed: Option<u64>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<commands::UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
