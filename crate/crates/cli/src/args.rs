use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Observation-only imitation: datasets, pretraining, intrinsic-reward RL
/// and analysis.
#[derive(Debug, Parser)]
#[command(name = "stg", version)]
pub struct Cli {
    /// Worker threads. Computation is single-threaded; the value is recorded
    /// in the run manifest.
    #[arg(long, global = true, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    pub threads: u64,

    /// JSON file with the subcommand's config; flags take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Roll out the scripted expert and save an observation-only dataset.
    GenData(GenDataArgs),
    /// Adversarially pretrain encoder, transformer, critic and regressor.
    Pretrain(PretrainArgs),
    /// Train a PPO policy on intrinsic rewards from a pretrained bundle.
    Train(TrainArgs),
    /// Evaluate a policy, or a random or expert baseline.
    Eval(EvalArgs),
    /// Embedding continuity, critic score histograms and PCA projections.
    Analyze(AnalyzeArgs),
    /// Finite-difference check of every training loss.
    Gradcheck(GradcheckArgs),
    /// Plot CSV curves, one PNG per metric.
    Plot(PlotArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TaskArg {
    Chase,
    Corridor,
}

impl TaskArg {
    pub fn name(self) -> &'static str {
        match self {
            TaskArg::Chase => "chase",
            TaskArg::Corridor => "corridor",
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct EnvArgs {
    #[arg(long, value_enum)]
    pub task: Option<TaskArg>,
    /// Cells per side.
    #[arg(long)]
    pub grid: Option<usize>,
    /// Pixels per cell side.
    #[arg(long)]
    pub scale: Option<usize>,
    #[arg(long)]
    pub horizon: Option<usize>,
    #[arg(long)]
    pub frame_stack: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct OutArgs {
    /// Output directory; defaults to `$STG_DATA_DIR/<subcommand>/seed-<seed>`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Replace a non-empty output directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[command(flatten)]
    pub env: EnvArgs,
    /// Successful expert trajectories to keep.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub traj: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    /// Dataset directory; repeat for multi-task pretraining.
    #[arg(long = "data")]
    pub data: Vec<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub kappa: Option<f64>,
    #[arg(long)]
    pub critic_lr: Option<f64>,
    #[arg(long)]
    pub generator_lr: Option<f64>,
    #[arg(long)]
    pub critic_steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seq_len: Option<usize>,
    #[arg(long)]
    pub tdr_batch: Option<usize>,
    #[arg(long)]
    pub d: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub block_size: Option<usize>,
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    /// Spectrally normalize the critic instead of relying on clipping alone.
    #[arg(long)]
    pub spectral_norm: bool,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Stg,
    GuideOnly,
    WithProgression,
}

impl ModeArg {
    pub fn kind(self) -> &'static str {
        match self {
            ModeArg::Stg => "stg",
            ModeArg::GuideOnly => "guide_only",
            ModeArg::WithProgression => "with_progression",
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Bundle file, or a pretraining directory holding `bundle.stgc`.
    #[arg(long)]
    pub bundle: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    #[arg(long)]
    pub eta: Option<f64>,
    /// Progression weight; required with `--mode with-progression`.
    #[arg(long)]
    pub nu: Option<f64>,
    #[command(flatten)]
    pub env: EnvArgs,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Environment-step budget.
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub eval_every: Option<usize>,
    #[arg(long)]
    pub eval_episodes: Option<usize>,
    /// Stop early once an evaluation reaches this success rate.
    #[arg(long)]
    pub target_success: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub rollout: Option<usize>,
    #[arg(long)]
    pub minibatch: Option<usize>,
    #[arg(long)]
    pub ppo_epochs: Option<usize>,
    #[arg(long)]
    pub entropy_coef: Option<f64>,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BaselineArg {
    Random,
    Expert,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Policy file, or a training directory holding `policy.stgc`.
    #[arg(long, conflicts_with = "baseline")]
    pub policy: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub baseline: Option<BaselineArg>,
    #[command(flatten)]
    pub env: EnvArgs,
    #[arg(long)]
    pub episodes: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Write `eval.json` and a manifest here; otherwise only print.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    /// Bundle file or pretraining directory; repeat to compare bundles.
    #[arg(long = "bundle")]
    pub bundles: Vec<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub continuity: bool,
    #[arg(long)]
    pub histogram: bool,
    #[arg(long)]
    pub projection: bool,
    /// Random pairs for the continuity baseline.
    #[arg(long)]
    pub pairs: Option<usize>,
    /// Shuffled pairs for the histogram.
    #[arg(long)]
    pub shuffles: Option<usize>,
    #[arg(long)]
    pub bins: Option<usize>,
    #[arg(long)]
    pub dims: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Run at 64-bit precision (the only supported precision).
    #[arg(long = "f64")]
    pub f64: bool,
    /// Check at most this many evenly spaced entries per parameter.
    #[arg(long)]
    pub max_elements: Option<usize>,
    /// Write `gradcheck.json` and a manifest here; otherwise only print.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    /// CSV files, one per seed, with identical columns.
    #[arg(long = "curves", required = true)]
    pub curves: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
}
