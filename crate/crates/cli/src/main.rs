//! `evi-hrnet`: corpus and mask generation, landmark preprocessing,
//! training, inference and evaluation.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use evi_core::ErrorKind;

#[derive(Debug, Parser)]
#[command(name = "evi-hrnet", version, about = "Landmark- and reference-guided video inpainting of HMD occlusions")]
struct Cli {
    /// Run configuration (TOML). Flags override its values.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render the parametric face corpus with landmark files and a manifest.
    MakeSyntheticCorpus(CorpusArgs),
    /// Write the HMD occlusion mask as a PNG.
    MakeMasks(MaskArgs),
    /// Detect landmarks for every clip of a dataset and write landmark files.
    Landmarks(LandmarkArgs),
    /// Train the generator and discriminator.
    Train(TrainArgs),
    /// Inpaint clips with a trained generator.
    Infer(InferArgs),
    /// Score predictions against ground truth.
    Evaluate(EvalArgs),
}

#[derive(Debug, Args)]
struct CorpusArgs {
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    clips: Option<usize>,
    /// Frames per clip.
    #[arg(long)]
    frames: Option<usize>,
    /// Frame side in pixels.
    #[arg(long)]
    size: Option<usize>,
    /// Number of clips (taken from the end) in the test split.
    #[arg(long)]
    test_clips: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args, Clone)]
struct GeometryArgs {
    /// Top edge of the occluder, as a fraction of the height.
    #[arg(long)]
    mask_top: Option<f64>,
    #[arg(long)]
    mask_bottom: Option<f64>,
    /// Left edge, as a fraction of the width.
    #[arg(long)]
    mask_left: Option<f64>,
    #[arg(long)]
    mask_right: Option<f64>,
    /// Corner radius, as a fraction of the shorter side.
    #[arg(long)]
    mask_corner_radius: Option<f64>,
}

#[derive(Debug, Args)]
struct MaskArgs {
    #[arg(long)]
    out: Option<PathBuf>,
    /// Frame height; defaults to the corpus frame size.
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[command(flatten)]
    geometry: GeometryArgs,
}

#[derive(Debug, Args)]
struct LandmarkArgs {
    /// Dataset manifest (file or directory).
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Write `<clip>/landmarks.txt` here instead of over the manifest's files.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Continue from this checkpoint directory.
    #[arg(long, value_name = "DIR")]
    resume: Option<PathBuf>,
    /// Total iteration budget (including iterations before a resume).
    #[arg(long)]
    iterations: Option<u64>,
    #[arg(long = "lr")]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Frames per training sample.
    #[arg(long)]
    clip_length: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Save a numbered checkpoint every N iterations (0: final only).
    #[arg(long)]
    checkpoint_every: Option<u64>,
    /// Global gradient-norm clip.
    #[arg(long)]
    grad_clip: Option<f64>,
    /// Feed an empty landmark channel.
    #[arg(long)]
    no_landmarks: bool,
    /// Clip frame used as the reference image.
    #[arg(long)]
    reference_index: Option<usize>,
    #[arg(long)]
    lambda_adv: Option<f64>,
    #[arg(long)]
    lambda_fer: Option<f64>,
    #[arg(long)]
    lambda_style: Option<f64>,
    #[arg(long)]
    lambda_vgg: Option<f64>,
    #[arg(long)]
    lambda_recon: Option<f64>,
    /// Generator width at full resolution.
    #[arg(long)]
    base_channels: Option<usize>,
    /// Mask image used instead of the geometry.
    #[arg(long)]
    mask: Option<PathBuf>,
    #[command(flatten)]
    geometry: GeometryArgs,
}

#[derive(Debug, Args)]
struct InferArgs {
    /// Checkpoint directory written by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Inpaint every clip of this dataset split instead of a single clip.
    #[arg(long, conflicts_with_all = ["frames", "landmarks", "reference"])]
    manifest: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "test", requires = "manifest")]
    split: SplitArg,
    /// Frame directory of a single clip.
    #[arg(long)]
    frames: Option<PathBuf>,
    /// Landmark file for the single clip.
    #[arg(long)]
    landmarks: Option<PathBuf>,
    /// Occlusion-free reference image for the single clip.
    #[arg(long)]
    reference: Option<PathBuf>,
    /// Mask image; the geometry is used when absent.
    #[arg(long)]
    mask: Option<PathBuf>,
    /// Feed an empty landmark channel whatever the checkpoint was trained with.
    #[arg(long)]
    no_landmarks: bool,
    #[command(flatten)]
    geometry: GeometryArgs,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum RegionArg {
    Full,
    Masked,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Ground-truth frames: one clip directory, or a directory of clip directories.
    #[arg(long)]
    gt: PathBuf,
    /// Predictions as LABEL=DIR, laid out like --gt; repeat for each model.
    #[arg(long = "pred", value_name = "LABEL=DIR", required = true)]
    preds: Vec<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Mask image; the geometry is used when absent.
    #[arg(long)]
    mask: Option<PathBuf>,
    #[arg(long, value_enum)]
    region: Option<RegionArg>,
    /// Add per-clip rows to the text report.
    #[arg(long)]
    per_clip: bool,
    #[command(flatten)]
    geometry: GeometryArgs,
}

/// Failure with the exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    code: u8,
    message: String,
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            message: message.into(),
        }
    }

    pub fn data(message: impl Into<String>) -> Self {
        Self {
            code: 3,
            message: message.into(),
        }
    }
}

impl From<evi_core::Error> for CliError {
    fn from(e: evi_core::Error) -> Self {
        let code = match e.kind() {
            ErrorKind::Config => 2,
            ErrorKind::Data => 3,
            ErrorKind::Numerical => 4,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
