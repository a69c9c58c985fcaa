use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "switchode", version, about = "Markov-switching ODE simulation and network recovery")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a benchmark system and write observations and ground truth.
    Simulate(SimulateArgs),
    /// Wavelet-denoise every column of an observation file.
    Denoise(DenoiseArgs),
    /// Fit the switching model at one penalty or along a penalty path.
    Fit(FitArgs),
    /// Choose states, basis size and penalty by BIC.
    Select(SelectArgs),
    /// Compare fitted parameters with the truth.
    Eval(EvalArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Dgp {
    Dgp1,
    Dgp2,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long, value_enum)]
    pub dgp: Dgp,
    /// Number of sampling intervals; N + 1 observations are written.
    #[arg(long, default_value_t = 200)]
    pub n: usize,
    /// Time horizon.
    #[arg(long, default_value_t = 40.0)]
    pub t: f64,
    /// Observation noise standard deviation.
    #[arg(long, default_value_t = 0.01)]
    pub sigma: f64,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub out_dir: PathBuf,
}

/// How the drift features are built from the observations.
#[derive(Debug, Args)]
pub struct FeatureArgs {
    /// Observation CSV (time column first).
    #[arg(long)]
    pub input: PathBuf,
    /// Previously denoised trajectory CSV; the observations are denoised here when absent.
    #[arg(long)]
    pub x_hat: Option<PathBuf>,
    /// Confidence parameter of the wavelet threshold.
    #[arg(long, default_value_t = 0.1)]
    pub delta: f64,
    /// Known noise level for the threshold; estimated from the data when absent.
    #[arg(long)]
    pub sigma: Option<f64>,
}

#[derive(Debug, Args)]
pub struct DenoiseArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, default_value_t = 0.1)]
    pub delta: f64,
    #[arg(long)]
    pub sigma: Option<f64>,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[command(flatten)]
    pub features: FeatureArgs,
    #[arg(long, default_value_t = 2)]
    pub k: usize,
    #[arg(long, default_value_t = 1)]
    pub m: usize,
    /// Single penalty.
    #[arg(long, conflicts_with = "lambda_grid")]
    pub lambda: Option<f64>,
    /// Penalty path: `default` or comma-separated values.
    #[arg(long)]
    pub lambda_grid: Option<String>,
    /// Window radius for truncated smoothing.
    #[arg(long)]
    pub trunc_r: Option<usize>,
    /// Observations carry `sequence` and `group` columns; fits one generator per group.
    #[arg(long, requires = "lambda")]
    pub grouped: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct SelectArgs {
    #[command(flatten)]
    pub features: FeatureArgs,
    /// Candidate state counts, comma-separated.
    #[arg(long, default_value = "1,2,3,4,5,6", value_delimiter = ',')]
    pub k: Vec<usize>,
    /// Candidate basis sizes, comma-separated.
    #[arg(long, default_value = "1,2,3,4,5", value_delimiter = ',')]
    pub m: Vec<usize>,
    /// Penalty grid: `default` or comma-separated values.
    #[arg(long, default_value = "default")]
    pub lambda_grid: String,
    #[arg(long)]
    pub trunc_r: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads; `SWITCHODE_THREADS` takes precedence.
    #[arg(long)]
    pub threads: Option<usize>,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// `params.json` or `path.json` written by `fit`.
    #[arg(long)]
    pub fit: PathBuf,
    /// Ground-truth `truth.json` written by `simulate`.
    #[arg(long)]
    pub truth: PathBuf,
    /// Block norms at or below this count as absent edges.
    #[arg(long, default_value_t = switchode::eval::DEFAULT_EPSILON)]
    pub epsilon_t: f64,
    #[arg(long)]
    pub out_dir: PathBuf,
}
