use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use d24fad::episodes::SupportMode;
use d24fad::l2w::L2WVariant;
use d24fad::nn::Precision;
use d24fad::scoring::ScoreReduce;
use d24fad::synth::PatternFamily;
use d24fad::train::Batching;

const TRAIN_EPOCHS: usize = 70;
const TRAIN_BATCH: usize = 64;
const TRAIN_LR: f64 = 5e-3;
const DEFAULT_K: usize = 4;
const DEFAULT_LAMBDA: f64 = 0.1;
const DEFAULT_TRIALS: usize = 5;

#[derive(Debug, Parser)]
#[command(name = "d24fad", version, about = "Few-shot anomaly detection by dual distillation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic multi-task benchmark.
    Synth(SynthArgs),
    /// Train on every task except the held-out one.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the held-out task over support trials.
    Eval(EvalArgs),
    /// Score one query image against a folder of support images.
    Score(ScoreArgs),
    /// Write pooled student embeddings of a task's test images.
    ExportEmbeddings(EmbedArgs),
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML config file; flags given on the command line take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[command(flatten)]
    pub common: Common,
    /// Output directory for the task folders.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Comma-separated pattern families.
    #[arg(long, value_delimiter = ',', default_value = "blobs,stripes,rings,checker")]
    pub families: Vec<PatternFamily>,
    #[arg(long, default_value_t = 32)]
    pub image_size: usize,
    #[arg(long, default_value_t = 40)]
    pub train_normal: usize,
    #[arg(long, default_value_t = 20)]
    pub test_normal: usize,
    #[arg(long, default_value_t = 20)]
    pub test_abnormal: usize,
    #[arg(long, default_value_t = 0.03)]
    pub noise_level: f64,
}

#[derive(Debug, Clone, Args)]
pub struct ModelArgs {
    /// Teacher backbone: tiny or wide_resnet50_2.
    #[arg(long, default_value = "tiny")]
    pub backbone: String,
    /// Teacher weights: random, imagenet, or a safetensors path.
    #[arg(long, default_value = "random")]
    pub weights: String,
    /// Seed of random teacher weights.
    #[arg(long, default_value_t = 0)]
    pub teacher_seed: u64,
    #[arg(long, default_value = "f32")]
    pub precision: Precision,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Benchmark root holding one folder per task.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Task left out of training.
    #[arg(long)]
    pub holdout: Option<String>,
    /// Run directory; checkpoints land in `<out>/checkpoints`.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_K)]
    pub k: usize,
    /// Weight of the teacher-student term.
    #[arg(long, default_value_t = DEFAULT_LAMBDA)]
    pub lambda: f64,
    /// Drop the teacher-student term (same as --lambda 0).
    #[arg(long)]
    pub no_tsd: bool,
    /// Train with the teacher-student term only.
    #[arg(long)]
    pub no_ssd: bool,
    /// Plain support mean instead of learned support weights.
    #[arg(long)]
    pub no_l2w: bool,
    #[arg(long, default_value = "scaled_dot")]
    pub l2w_variant: L2WVariant,
    #[arg(long, default_value_t = TRAIN_EPOCHS)]
    pub epochs: usize,
    #[arg(long, default_value_t = TRAIN_BATCH)]
    pub batch_size: usize,
    #[arg(long, default_value_t = TRAIN_LR)]
    pub lr: f64,
    #[arg(long, default_value = "per_task")]
    pub batching: Batching,
    /// Seed of the split, episode draws and student initialization.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1)]
    pub blocks_per_stage: usize,
    /// Continue the run stored in this checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Stop after this many epochs in this invocation and save a checkpoint.
    #[arg(long)]
    pub stop_after: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Task to evaluate; defaults to the checkpoint's held-out task.
    #[arg(long)]
    pub holdout: Option<String>,
    /// Run directory for `reports/` and `exports/`.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_K)]
    pub k: usize,
    #[arg(long, default_value = "random")]
    pub support_mode: SupportMode,
    #[arg(long, default_value_t = DEFAULT_TRIALS)]
    pub trials: usize,
    /// First trial seed; trial i uses seed + i.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
    #[arg(long, default_value = "mean")]
    pub score_reduce: ScoreReduce,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Folder of normal support images.
    #[arg(long)]
    pub support: PathBuf,
    #[arg(long)]
    pub query: PathBuf,
    /// Write a heatmap overlay PNG here.
    #[arg(long)]
    pub heatmap: Option<PathBuf>,
    #[arg(long, default_value = "mean")]
    pub score_reduce: ScoreReduce,
}

#[derive(Debug, Args)]
pub struct EmbedArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Task whose test images are embedded; defaults to the held-out task.
    #[arg(long)]
    pub task: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
}
