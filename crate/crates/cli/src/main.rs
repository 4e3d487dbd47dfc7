mod commands;
mod render;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "uqdepth", version, about = "Monocular depth with uncertainty-based branch fusion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a procedural toy-colon dataset.
    GenToy(GenToyArgs),
    /// Pre-train both branches, then fine-tune the fused model.
    Train(TrainArgs),
    /// Per-image and aggregate depth metrics.
    Eval(EvalArgs),
    /// Fused depth PNGs, uncertainty grids and side-by-side previews.
    Predict(PredictArgs),
    /// Sparsification and oracle curves.
    Sparsify(SparsifyArgs),
    /// Back-project predictions to PLY point clouds.
    Reconstruct(ReconstructArgs),
}

#[derive(Debug, Args)]
struct GenToyArgs {
    #[arg(long)]
    count: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct DataArgs {
    /// Dataset directory (`rgb/`, `depth/`, `meta.json`).
    #[arg(long)]
    data: PathBuf,
    /// Remove black endoscope borders before resizing.
    #[arg(long)]
    crop_black_border: bool,
    #[arg(long, default_value_t = 10)]
    batch_size: usize,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    out: PathBuf,
    /// Flat TOML file with training keys; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Square input side the data is resized to.
    #[arg(long, default_value_t = 64)]
    size: usize,
    /// Fusion or ablation mode.
    #[arg(long)]
    mode: Option<String>,
    /// Zero the MAP loss weights during fine-tuning.
    #[arg(long)]
    without_map: bool,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    pretrain_epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    no_augment: bool,
    /// Use DenseNet-169 widths for the convolutional branch.
    #[arg(long)]
    full_scale: bool,
}

#[derive(Debug, Args)]
struct CkptArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[command(flatten)]
    common: CkptArgs,
    /// Rescale predictions by median(gt) / median(pred) first.
    #[arg(long)]
    median_scale: bool,
}

#[derive(Debug, Args)]
struct PredictArgs {
    #[command(flatten)]
    common: CkptArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
enum SigmaSource {
    /// Fusion-weighted mix of both branch uncertainties.
    Fused,
    Local,
    Global,
}

#[derive(Debug, Args)]
struct SparsifyArgs {
    #[command(flatten)]
    common: CkptArgs,
    #[arg(long, value_enum, default_value_t = SigmaSource::Fused)]
    sigma: SigmaSource,
    /// Also render the averaged curves as a PNG.
    #[arg(long)]
    plot: bool,
}

#[derive(Debug, Args)]
struct ReconstructArgs {
    #[command(flatten)]
    common: CkptArgs,
    #[arg(long)]
    fx: Option<f64>,
    #[arg(long)]
    fy: Option<f64>,
    #[arg(long)]
    cx: Option<f64>,
    #[arg(long)]
    cy: Option<f64>,
}

/// Honour `UQDEPTH_THREADS` for both rayon and the tensor kernels.
fn configure_threads() -> anyhow::Result<()> {
    let Ok(raw) = std::env::var("UQDEPTH_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .map_err(|_| anyhow::anyhow!("UQDEPTH_THREADS must be a positive integer, got `{raw}`"))?;
    if n == 0 {
        anyhow::bail!("UQDEPTH_THREADS must be positive");
    }
    std::env::set_var("RAYON_NUM_THREADS", n.to_string());
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = configure_threads().and_then(|()| match cli.command {
        Command::GenToy(a) => commands::gen_toy(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Predict(a) => commands::predict(a),
        Command::Sparsify(a) => commands::sparsify(a),
        Command::Reconstruct(a) => commands::reconstruct(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
