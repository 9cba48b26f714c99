//! `condvid` command-line front end.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use condvid::attention::AttentionMode;
use condvid::sampler::{BackgroundMode, ControlMode};

#[derive(Parser, Debug)]
#[command(name = "condvid", version, about = "Toy conditional video diffusion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate (or read) the synthetic dataset and train denoiser and control branch.
    Train(TrainArgs),
    /// Sample one video from a checkpoint.
    Generate(GenerateArgs),
    /// DDIM-invert a video of PPM frames to an initial latent.
    Invert(InvertArgs),
    /// Run the attention-mode by control-mode grid.
    Ablate(AblateArgs),
    /// Time temporal attention under each frame-sampling mode.
    Bench(BenchArgs),
    /// Score a directory of frames.
    Metrics(MetricsArgs),
}

#[derive(Args, Debug)]
struct Common {
    /// JSON run config; defaults apply to anything it omits.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Train on a stored dataset instead of generating one.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    image_steps: Option<usize>,
    #[arg(long)]
    control_steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

/// Sampler knobs shared by generate and invert.
#[derive(Args, Debug)]
struct SamplerFlags {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    text: Option<String>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    mode: Option<AttentionMode>,
    #[arg(long)]
    gap: Option<usize>,
    /// Sample in 64-bit floats.
    #[arg(long)]
    f64: bool,
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    sampler: SamplerFlags,
    #[arg(long)]
    seed_b: Option<u64>,
    #[arg(long)]
    seed_c: Option<u64>,
    #[arg(long)]
    guidance: Option<f64>,
    #[arg(long, value_parser = parse_control)]
    control: Option<ControlMode>,
    #[arg(long, value_parser = parse_background)]
    background: Option<BackgroundMode>,
    #[arg(long)]
    cond_noise_scale: Option<f64>,
    /// Directory of `mask_%04d.pgm` condition frames.
    #[arg(long)]
    condition: Option<PathBuf>,
    /// Reference video (PPM frames) to invert for the background.
    #[arg(long)]
    video: Option<PathBuf>,
    /// Precomputed inverted latent written by `invert`.
    #[arg(long, conflicts_with = "video")]
    latent: Option<PathBuf>,
    /// Also write the final latents as `latents.cvt1`.
    #[arg(long)]
    dump_latents: bool,
}

#[derive(Args, Debug)]
pub struct InvertArgs {
    /// Directory of `frame_%04d.ppm` files.
    video: PathBuf,
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    sampler: SamplerFlags,
    /// Invert with the prompt instead of the empty text.
    #[arg(long)]
    conditional: bool,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Evaluate on a stored dataset instead of generated held-out scenes.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[arg(long, default_value_t = 24)]
    frames: usize,
    /// Latent side; tokens per frame is its square.
    #[arg(long, default_value_t = 64)]
    latent: usize,
    #[arg(long, default_value_t = 4)]
    dim: usize,
    #[arg(long, default_value_t = condvid::attention::DEFAULT_GAP)]
    gap: usize,
    /// Comma-separated modes, or `all`.
    #[arg(long, default_value = "all")]
    modes: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// CSV destination; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct MetricsArgs {
    /// Directory of `frame_%04d.ppm` files.
    video: PathBuf,
    /// Condition masks to score IoU against.
    #[arg(long)]
    condition: Option<PathBuf>,
    #[arg(long, default_value_t = 0.25)]
    threshold: f64,
}

fn parse_control(s: &str) -> Result<ControlMode, String> {
    serde_json::from_value(serde_json::Value::String(s.into())).map_err(|_| format!("expected 2d or 3d, got {s:?}"))
}

fn parse_background(s: &str) -> Result<BackgroundMode, String> {
    serde_json::from_value(serde_json::Value::String(s.into()))
        .map_err(|_| format!("expected noise or inverted, got {s:?}"))
}

/// `CONDVID_THREADS` caps the rayon pool; 0 means a single thread.
fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var("CONDVID_THREADS") else {
        return Ok(());
    };
    let n: usize = v.trim().parse().with_context(|| format!("CONDVID_THREADS={v:?} is not a count"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n.max(1))
        .build_global()
        .context("configuring the thread pool")
}

fn run() -> Result<()> {
    init_threads()?;
    match Cli::parse().command {
        Command::Train(a) => commands::train(a),
        Command::Generate(a) => commands::generate(a),
        Command::Invert(a) => commands::invert(a),
        Command::Ablate(a) => commands::ablate(a),
        Command::Bench(a) => commands::bench(a),
        Command::Metrics(a) => commands::metrics(a),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
