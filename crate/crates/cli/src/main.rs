//! `deer`: generate phantom datasets, train, reconstruct and evaluate.

mod commands;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Learned filtered back-projection for few-view CT.
#[derive(Parser, Debug)]
#[command(name = "deer", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate phantoms and few-view sinograms into `<out>/data`.
    GenData(GenDataArgs),
    /// Train a model on `<out>/data` (or `--data`), writing checkpoints
    /// and a JSON-lines log under `<out>`.
    Train(TrainArgs),
    /// Reconstruct one sinogram raster with a checkpoint.
    Reconstruct(ReconstructArgs),
    /// Score checkpoints and the FBP baselines on a dataset split.
    Evaluate(EvaluateArgs),
    /// Certify every autodiff operator against finite differences.
    GradCheck(GradCheckArgs),
}

/// Where a config-driven command writes.
#[derive(Args, Debug)]
struct RunDir {
    /// Experiment configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory. Falls back to `out_dir` of the config, then to
    /// `$DEER_OUT_ROOT/<config name>`, then to `runs/<config name>`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overwrite existing outputs.
    #[arg(long)]
    force: bool,
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[command(flatten)]
    run: RunDir,
    /// Base seed of the phantoms; overrides `data.seed`.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    run: RunDir,
    /// Seed of initialization and shuffling; overrides `seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Dataset directory; defaults to `<out>/data`.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Continue from this checkpoint; its config hash must match.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Keep only the newest N per-epoch checkpoints (0 keeps all).
    #[arg(long, default_value_t = 0)]
    keep_last: usize,
}

#[derive(Args, Debug)]
struct ReconstructArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Few-view sinogram raster.
    #[arg(long)]
    sinogram: PathBuf,
    /// Output image raster.
    #[arg(long)]
    out: PathBuf,
    /// Dense view count; defaults to the sinogram header, then to twice
    /// its view count.
    #[arg(long)]
    dense_views: Option<usize>,
    /// Also write a PNG rendering here.
    #[arg(long)]
    png: Option<PathBuf>,
    /// Display window `LO,HI` of the PNG.
    #[arg(long, value_parser = output::parse_window, default_value = "0,1")]
    png_window: (f32, f32),
    /// Overwrite existing outputs.
    #[arg(long)]
    force: bool,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    /// Checkpoint to score; repeat for several.
    #[arg(long, required = true)]
    checkpoint: Vec<PathBuf>,
    /// Dataset directory.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    /// Re-acquire the split's phantoms at this few-view count (dense view
    /// count twice as large) before scoring.
    #[arg(long)]
    views: Option<usize>,
    /// Report directory; defaults to `$DEER_OUT_ROOT/eval`, then
    /// `runs/eval`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overwrite an existing report.
    #[arg(long)]
    force: bool,
}

#[derive(Args, Debug)]
struct GradCheckArgs {
    /// Random trials per operator.
    #[arg(long, default_value_t = 20)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Largest accepted relative error.
    #[arg(long, default_value_t = 1e-6)]
    tol: f64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(a),
        Command::Train(a) => commands::train(a),
        Command::Reconstruct(a) => commands::reconstruct(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::GradCheck(a) => commands::grad_check(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
