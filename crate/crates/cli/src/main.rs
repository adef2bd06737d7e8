//! `mvfd`: synthetic data, preprocessing, training, evaluation, inference
//! and Grad-CAM panels for the multi-view face forgery detector.

mod commands;
mod config;
mod outdir;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use config::UsageError;

#[derive(Debug, Parser)]
#[command(name = "mvfd", version, about = "Multi-view face forgery detector")]
pub struct Cli {
    /// JSON config file; falls back to $MVFD_CONFIG.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Print a machine-readable summary on stdout.
    #[arg(long, global = true)]
    json: bool,
    /// More log output (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    /// Only warnings and errors.
    #[arg(short, long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render a synthetic real/fake face set with annotations and splits.
    Synth(SynthArgs),
    /// Build a manifest from synthetic renders or video frames.
    #[command(subcommand)]
    Ingest(Ingest),
    /// Extract the three views of every usable face.
    Preprocess(PreprocessArgs),
    /// Fit a detector on the train split, selecting on validation F1.
    Train(TrainArgs),
    /// Score a checkpoint on one split.
    Eval(EvalArgs),
    /// Score every annotated face in the given images.
    Infer(InferArgs),
    /// Grad-CAM panel for one face.
    Explain(ExplainArgs),
}

#[derive(Debug, Subcommand)]
enum Ingest {
    /// Same as `mvfd synth`.
    Synth(SynthArgs),
    /// Sample frames from `ROOT/{real,fake}/<video>/*.png`.
    Frames(FramesArgs),
}

#[derive(Debug, Args)]
struct SeedArg {
    /// Root seed; every random stream is derived from it.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct OutDirArgs {
    /// Output directory, created atomically.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Replace an existing non-empty output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Debug, Args)]
struct ViewArgs {
    /// Local-view hull dilation in pixels.
    #[arg(long)]
    margin: Option<f64>,
    /// Global-view box growth in pixels.
    #[arg(long)]
    expand: Option<f64>,
    /// View side length.
    #[arg(long)]
    side: Option<usize>,
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Images per class.
    #[arg(long)]
    count: Option<usize>,
    #[command(flatten)]
    seed: SeedArg,
    /// Image side length.
    #[arg(long = "image-side")]
    image_side: Option<usize>,
    /// central-blend-seam, patch-noise or color-mismatch.
    #[arg(long)]
    artifact: Option<String>,
    #[arg(long)]
    strength: Option<f64>,
    #[command(flatten)]
    out: OutDirArgs,
}

#[derive(Debug, Args)]
struct FramesArgs {
    /// Directory holding `real/` and `fake/` video folders.
    #[arg(long, value_name = "DIR")]
    root: PathBuf,
    /// Keep one frame in this many.
    #[arg(long, default_value_t = 10)]
    stride: usize,
    /// Shared annotation file; without it each frame needs a `.jsonl` sidecar.
    #[arg(long, value_name = "FILE")]
    annotations: Option<PathBuf>,
    #[command(flatten)]
    seed: SeedArg,
    #[command(flatten)]
    out: OutDirArgs,
}

#[derive(Debug, Args)]
struct PreprocessArgs {
    #[arg(long, value_name = "FILE")]
    manifest: PathBuf,
    #[command(flatten)]
    views: ViewArgs,
    #[command(flatten)]
    out: OutDirArgs,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long, value_name = "FILE")]
    manifest: PathBuf,
    #[command(flatten)]
    seed: SeedArg,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long = "lr")]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Backbone family: residual-conv, image-transformer, mobile-conv or tiny-test.
    #[arg(long)]
    family: Option<String>,
    #[arg(long)]
    feature_dim: Option<usize>,
    /// Comma-separated subset of global,middle,local.
    #[arg(long, value_delimiter = ',')]
    views: Option<Vec<String>>,
    /// Leave the pose feature out of fusion.
    #[arg(long)]
    no_pose: bool,
    /// Pretrain the pose encoder on the synthetic pose set first.
    #[arg(long)]
    pose_pretrain: bool,
    /// Continue from a training checkpoint (`last.ckpt` or `epoch_*.ckpt`).
    #[arg(long, value_name = "CKPT")]
    resume: Option<PathBuf>,
    #[command(flatten)]
    view_params: ViewArgs,
    #[command(flatten)]
    out: OutDirArgs,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long, value_name = "CKPT", required = true)]
    checkpoint: PathBuf,
    #[arg(long, value_name = "FILE", required = true)]
    manifest: PathBuf,
    /// train, val or test.
    #[arg(long, default_value = "test")]
    split: String,
    #[command(flatten)]
    views: ViewArgs,
    #[command(flatten)]
    out: OutDirArgs,
}

#[derive(Debug, Args)]
struct InferArgs {
    #[arg(long, value_name = "CKPT")]
    checkpoint: PathBuf,
    /// PNG image; repeatable.
    #[arg(long = "image", value_name = "PATH", required = true)]
    images: Vec<PathBuf>,
    #[arg(long, value_name = "FILE")]
    annotations: Option<PathBuf>,
    #[command(flatten)]
    views: ViewArgs,
    /// Also write the records here.
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ExplainArgs {
    #[arg(long, value_name = "CKPT")]
    checkpoint: PathBuf,
    /// A second model shown as the third panel.
    #[arg(long, value_name = "CKPT")]
    compare: Option<PathBuf>,
    #[arg(long, value_name = "PATH")]
    image: PathBuf,
    #[arg(long, value_name = "FILE")]
    annotations: Option<PathBuf>,
    /// Which face of the image.
    #[arg(long, default_value_t = 0)]
    face: usize,
    #[arg(long, default_value = "local")]
    view: String,
    /// Encoder layer; the backbone's last spatial layer by default.
    #[arg(long)]
    layer: Option<String>,
    #[arg(long, default_value_t = 0.5)]
    alpha: f64,
    #[command(flatten)]
    views: ViewArgs,
    /// Panel image; a JSON summary is written next to it.
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
}

fn init_logging(cli: &Cli) {
    let level = match (cli.quiet, cli.verbose) {
        (true, _) => "warn",
        (false, 0) => "info",
        (false, 1) => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    init_logging(&cli);
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.downcast_ref::<UsageError>().is_some() => {
            eprintln!("error: {e}\n\nFor more information, try '--help'.");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
