//! Flag definitions. `--help` on any subcommand is the normative reference
//! for flags and defaults.

use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;

#[derive(Parser, Debug)]
#[command(
    name = "rmoe",
    about = "Residual mixture-of-experts for next-window event prediction",
    version
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic heterogeneous dataset with its generator world file
    GenData(GenDataArgs),
    /// Phase 1: train the base GRU model
    TrainBase(TrainBaseArgs),
    /// Phase 2: train the residual mixture on top of a frozen base checkpoint
    TrainRmoe(TrainRmoeArgs),
    /// Ablation: train a plain mixture of experts from scratch
    TrainMoe(TrainMoeArgs),
    /// Evaluate a checkpoint on the test split (AUPRC per event type)
    Eval(EvalArgs),
    /// Run a (number of experts) x (hidden dim) x (seed) grid
    Sweep(SweepArgs),
    /// Compare two metrics files: per-type gains and plot data
    Report(ReportArgs),
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    /// Number of latent subpopulations K
    #[arg(long, default_value_t = 4)]
    pub k_subpops: usize,
    /// Number of event types |E|
    #[arg(long, default_value_t = 30)]
    pub n_events: usize,
    /// Number of sequences to generate
    #[arg(long, default_value_t = 1000)]
    pub n_seqs: usize,
    /// Minimum sequence length in windows (>= 2)
    #[arg(long, default_value_t = 10)]
    pub len_min: usize,
    /// Maximum sequence length in windows
    #[arg(long, default_value_t = 20)]
    pub len_max: usize,
    /// Window size in hours (metadata recorded in the dataset header)
    #[arg(long, default_value_t = 24.0)]
    pub window: f64,
    /// Fraction of sequences held out as the test split
    #[arg(long, default_value_t = 0.2)]
    pub test_fraction: f64,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Output directory (created; must not already hold a run manifest)
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone)]
pub struct TrainCommonArgs {
    /// Dataset file written by gen-data
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for checkpoint.json, history.csv, run.json
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub lr: Option<f64>,
    /// L2 weight decay strength
    #[arg(long)]
    pub l2: Option<f64>,
    #[arg(long, default_value_t = 100)]
    pub epochs: usize,
    /// Early-stopping patience in epochs
    #[arg(long, default_value_t = 5)]
    pub patience: usize,
    #[arg(long, default_value_t = 1)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    /// Fraction of the train split held out for validation
    #[arg(long, default_value_t = 0.1)]
    pub val_fraction: f64,
    /// Decoupled weight decay instead of classic coupled L2
    #[arg(long, default_value_t = false)]
    pub decoupled_decay: bool,
}

#[derive(Args, Debug)]
pub struct TrainBaseArgs {
    #[command(flatten)]
    pub common: TrainCommonArgs,
    /// Embedding dimension ε
    #[arg(long, default_value_t = 64)]
    pub emb_dim: usize,
    /// GRU hidden dimension d
    #[arg(long, default_value_t = 512)]
    pub hidden_dim: usize,
}

#[derive(Args, Debug)]
pub struct TrainRmoeArgs {
    #[command(flatten)]
    pub common: TrainCommonArgs,
    /// Trained base checkpoint (phase 1 output)
    #[arg(long)]
    pub base_checkpoint: PathBuf,
    /// Number of experts n
    #[arg(long, default_value_t = 50)]
    pub experts: usize,
    /// Expert/gating GRU hidden dimension d'
    #[arg(long, default_value_t = 64)]
    pub hidden_dim: usize,
    /// How base and mixture outputs combine: prob-sum | logit-sum
    #[arg(long, default_value = "prob-sum")]
    pub combine: String,
}

#[derive(Args, Debug)]
pub struct TrainMoeArgs {
    #[command(flatten)]
    pub common: TrainCommonArgs,
    #[arg(long, default_value_t = 50)]
    pub experts: usize,
    #[arg(long, default_value_t = 64)]
    pub hidden_dim: usize,
    /// Embedding dimension for the mixture's own fresh embedding
    #[arg(long, default_value_t = 64)]
    pub emb_dim: usize,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Also evaluate the generator's exact oracle (requires --world and --labels)
    #[arg(long, default_value_t = false)]
    pub oracle: bool,
    /// Generator world file written by gen-data
    #[arg(long)]
    pub world: Option<PathBuf>,
    /// Latent subpopulation labels written by gen-data
    #[arg(long)]
    pub labels: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub base_checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Comma-separated expert counts
    #[arg(long)]
    pub experts: Option<String>,
    /// Comma-separated expert hidden dimensions d'
    #[arg(long)]
    pub hidden_dims: Option<String>,
    /// Comma-separated seeds
    #[arg(long)]
    pub seeds: Option<String>,
    /// Also run the from-scratch mixture ablation in every cell
    #[arg(long, default_value_t = false)]
    pub ablation: bool,
    /// Parallel worker threads over cells
    #[arg(long)]
    pub jobs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub l2: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    /// Flat key=value file overriding sweep defaults (flags still win)
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// metrics.csv of the baseline model
    #[arg(long)]
    pub base: PathBuf,
    /// metrics.csv of the challenger model
    #[arg(long)]
    pub challenger: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}
