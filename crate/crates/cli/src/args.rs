use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "kpp", version, about = "Train and probe a block-allocated spatial memory generative model")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and log per-epoch metrics.
    Train(TrainArgs),
    /// Generate images from a memory written by a test episode.
    Generate(GenerateArgs),
    /// Corrupt test images and clean them up by iterative reads.
    Denoise(DenoiseArgs),
    /// Sweep episode length, read count or the memory path over several seeds.
    Ablate(AblateArgs),
    /// Print the conditional test bound of a checkpoint.
    Eval(EvalArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BinarizeArg {
    None,
    Threshold,
    Stochastic,
}

/// Where images come from.
#[derive(Debug, Clone, Args)]
pub struct DataArgs {
    /// `synth`, a directory holding MNIST-style IDX files, or a single IDX image file.
    #[arg(long, default_value = "synth")]
    pub data: String,
    /// Seed for corpus generation and static binarization.
    #[arg(long, default_value_t = 0)]
    pub data_seed: u64,
    /// Training images to use (synth corpus size, or a cap for files).
    #[arg(long, default_value_t = 512)]
    pub n_train: usize,
    /// Test images to use.
    #[arg(long, default_value_t = 128)]
    pub n_test: usize,
    /// Side length of synthetic images.
    #[arg(long, default_value_t = 16)]
    pub image_size: usize,
    #[arg(long, value_enum, default_value_t = BinarizeArg::Stochastic)]
    pub binarize: BinarizeArg,
}

/// Model and optimizer settings shared by `train` and `ablate`.
#[derive(Debug, Clone, Args)]
pub struct ModelArgs {
    /// Episode length.
    #[arg(long = "T", default_value_t = 8)]
    pub t: usize,
    /// Reads per image.
    #[arg(long = "K", default_value_t = 2)]
    pub k: usize,
    /// Latent width.
    #[arg(long = "L", default_value_t = 64)]
    pub l: usize,
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    #[arg(long, default_value_t = 4)]
    pub batch: usize,
    /// Optimizer steps per epoch; defaults to one pass over the training images.
    #[arg(long)]
    pub steps_per_epoch: Option<usize>,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    /// `cosine` or `constant`.
    #[arg(long, default_value = "cosine")]
    pub schedule: String,
    #[arg(long, default_value_t = 10)]
    pub warmup: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub weight_decay: f64,
    /// Memory channels.
    #[arg(long, default_value_t = 3)]
    pub memory_channels: usize,
    /// Memory height and width.
    #[arg(long, default_value_t = 64)]
    pub memory_size: usize,
    /// Trace height and width.
    #[arg(long, default_value_t = 16)]
    pub trace_size: usize,
    /// Disable the temporal channel shift in the encoder.
    #[arg(long)]
    pub no_tsm: bool,
    /// `bernoulli` or `gaussian:SIGMA`.
    #[arg(long, default_value = "bernoulli")]
    pub likelihood: String,
}

#[derive(Debug, Clone, Args)]
#[command(args_override_self = true)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Replace the memory path with the parameter-matched dense prior.
    #[arg(long)]
    pub no_memory: bool,
    /// Run directory; defaults to `runs/train-seed<SEED>`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// File of `key = value` lines naming long flags; flags on the command line win.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Record elapsed time in metrics.csv (makes the file run-dependent).
    #[arg(long)]
    pub wall_clock: bool,
}

#[derive(Debug, Clone, Args)]
#[command(args_override_self = true)]
pub struct GenerateArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value_t = 16)]
    pub n: usize,
    /// Perturb one base key set with noise of this standard deviation.
    #[arg(long)]
    pub perturb: Option<f64>,
    /// Length of the episode written into memory.
    #[arg(long = "T", default_value_t = 8)]
    pub t: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Images per row of the grid.
    #[arg(long, default_value_t = 8)]
    pub grid_cols: usize,
}

#[derive(Debug, Clone, Args)]
#[command(args_override_self = true)]
pub struct DenoiseArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    /// `salt_pepper`, `speckle` or `poisson`, optionally with `:VALUE`.
    #[arg(long)]
    pub noise: String,
    #[arg(long, default_value_t = 10)]
    pub steps: usize,
    #[arg(long, default_value_t = 8)]
    pub n: usize,
    #[arg(long = "T", default_value_t = 8)]
    pub t: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Axis {
    #[value(name = "T")]
    T,
    #[value(name = "K")]
    K,
    #[value(name = "memory")]
    Memory,
}

#[derive(Debug, Clone, Args)]
#[command(args_override_self = true)]
pub struct AblateArgs {
    #[arg(long, value_enum)]
    pub axis: Axis,
    /// Comma-separated values: integers for `T`/`K`, `on`/`off` for `memory`.
    #[arg(long)]
    pub values: String,
    /// Comma-separated seeds.
    #[arg(long, default_value = "0")]
    pub seeds: String,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
#[command(args_override_self = true)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long = "T", default_value_t = 8)]
    pub t: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub config: Option<PathBuf>,
}
