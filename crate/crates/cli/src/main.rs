//! `trackfill` command-line front end.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;

#[derive(Parser, Debug)]
#[command(name = "trackfill", version, about = "Online multi-object tracking with learned motion inpainting")]
struct Cli {
    /// Run configuration (TOML). Defaults are used when absent.
    #[arg(long, global = true, env = "TRACKFILL_CONFIG")]
    config: Option<PathBuf>,

    /// Overrides every seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate synthetic sequences with ground truth and noisy detections.
    Synth(SynthArgs),
    /// Fit the velocity codebook on ground-truth trajectories.
    FitCodebook(FitArgs),
    /// Train the motion model.
    Train(TrainArgs),
    /// Track every sequence under a directory.
    Track(TrackArgs),
    /// Score a result file against ground truth.
    Evaluate(EvalArgs),
    /// Dump the sampled inpainting branches for one gap as CSV.
    InpaintDemo(DemoArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Output directory; sequences are written to `<out>/<name>-NN`.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    sequences: usize,
}

#[derive(Args, Debug)]
struct FitArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Clusters per component.
    #[arg(long)]
    k: Option<usize>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    codebook: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    iterations: Option<usize>,
}

#[derive(Args, Debug)]
struct TrackArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    codebook: Option<PathBuf>,
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Directory for `<sequence>.txt` results and metrics files.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Sequences processed in parallel.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Disable inpainting (zero samples).
    #[arg(long)]
    no_inpaint: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Ground-truth file.
    #[arg(long)]
    gt: PathBuf,
    /// Result file.
    #[arg(long)]
    pred: PathBuf,
    /// Also write `key=value` metrics here.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    iou: Option<f64>,
}

#[derive(Args, Debug)]
struct DemoArgs {
    /// A single sequence directory.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    codebook: Option<PathBuf>,
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Tracklet id; the first gapped tracklet when omitted.
    #[arg(long)]
    track: Option<u64>,
    /// Earliest frame to inpaint at.
    #[arg(long, default_value_t = 1)]
    frame: u32,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
