use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

/// Category-level shape spaces: train, infer, warp grasps, generate and benchmark.
#[derive(Debug, Parser)]
#[command(name = "cls", version)]
pub struct Cli {
    /// Worker threads for training and benchmarks (default: logical cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Learn a category model from a directory of training clouds.
    Train(TrainArgs),
    /// Fit a model to an observed cloud and complete its shape.
    Infer(InferArgs),
    /// Transfer a grasp annotation onto an inferred instance.
    Warp(WarpArgs),
    /// Decode a latent vector into a shape.
    Generate(GenerateArgs),
    /// Run a robustness experiment plan.
    Bench(BenchArgs),
    /// Write the synthetic training and held-out clouds of a plan.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct CpdFlags {
    /// Kernel width of the deformation field.
    #[arg(long)]
    pub beta: Option<f64>,
    /// Motion-coherence weight.
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Uniform outlier weight in [0, 1).
    #[arg(long)]
    pub omega: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Directory of training clouds (.ply or .csv), read in file-name order.
    #[arg(long)]
    pub input: PathBuf,
    /// Model file to write.
    #[arg(long)]
    pub output: PathBuf,
    /// Canonical shape: `auto` or a zero-based index into the sorted files.
    #[arg(long)]
    pub canonical: Option<String>,
    /// Seed for the subspace initialization.
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub cpd: CpdFlags,
    /// JSON training configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Observed cloud (.ply or .csv).
    #[arg(long)]
    pub input: PathBuf,
    /// Output prefix: writes `<prefix>.ply` and `<prefix>.json`.
    #[arg(long)]
    pub output: PathBuf,
    /// Mixture variance (default (0.05 · canonical diagonal)²).
    #[arg(long)]
    pub sigma2: Option<f64>,
    /// Points in the completed cloud (default: canonical size).
    #[arg(long)]
    pub points: Option<usize>,
    /// Sum over model points instead of observed points.
    #[arg(long)]
    pub literal_eq12: bool,
    /// Exit 0 even if the optimizer did not converge.
    #[arg(long)]
    pub allow_nonconverged: bool,
    /// JSON inference configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct WarpArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Inference result JSON written by `infer`.
    #[arg(long)]
    pub result: PathBuf,
    /// Grasp annotation JSON in canonical coordinates.
    #[arg(long)]
    pub input: PathBuf,
    /// Warped annotation JSON to write.
    #[arg(long)]
    pub output: PathBuf,
    /// Warp even if the inference did not converge.
    #[arg(long)]
    pub allow_nonconverged: bool,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Comma-separated latent vector of length q.
    #[arg(long, allow_hyphen_values = true, conflicts_with = "seed")]
    pub latent: Option<String>,
    /// Draw the latent vector from the training distribution.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Cloud to write; a `.json` sidecar records the latent vector.
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// JSON experiment plan (default: the desk-scale mug plan).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Directory for records, summaries, timings and the model.
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub cpd: CpdFlags,
    /// Mixture variance for latent inference.
    #[arg(long)]
    pub sigma2: Option<f64>,
    /// Sum over model points instead of observed points.
    #[arg(long)]
    pub literal_eq12: bool,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// JSON experiment plan whose data section is used.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Directory receiving `train/` and `test/`.
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
}
