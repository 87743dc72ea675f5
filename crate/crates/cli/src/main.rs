use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod manifest;

/// Fit, sample and evaluate risk-field driver models.
#[derive(Debug, Parser)]
#[command(name = "riskfield", version, about)]
struct Cli {
    /// Log progress and write per-iteration convergence tables.
    #[arg(long, global = true)]
    verbose: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit per-obstacle models from a driving log.
    Fit(FitArgs),
    /// Sample an ensemble of trajectories from a fitted model.
    Sample(SampleArgs),
    /// Write a synthetic driving log drawn from a model.
    Synth(SynthArgs),
    /// Score a model against a held-out log.
    Eval(EvalArgs),
    /// Sweep one parameter over its quantile levels.
    Sweep(SweepArgs),
    /// Render trajectory and speed overlays as SVG.
    Plot(PlotArgs),
}

#[derive(Debug, Args)]
struct FitArgs {
    #[arg(long)]
    course: PathBuf,
    #[arg(long)]
    log: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Fit a single preview time instead of searching the grid.
    #[arg(long)]
    preview: Option<f64>,
    #[arg(long, value_delimiter = ',', default_value = "0.6,0.8,1.0,1.2")]
    preview_grid: Vec<f64>,
    /// Use every k-th log row (default: about 10 Hz).
    #[arg(long)]
    stride: Option<usize>,
    /// Fit the whole log as one dataset.
    #[arg(long)]
    no_segment: bool,
}

#[derive(Debug, Args)]
struct Sampling {
    #[arg(long)]
    seed: u64,
    /// Control steps per trajectory.
    #[arg(long, default_value_t = 100)]
    steps: usize,
    /// Control period, s.
    #[arg(long, default_value_t = 0.1)]
    dt: f64,
    /// Initial state as x,y,v,psi (default: course start at target speed).
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    init: Option<Vec<f64>>,
}

#[derive(Debug, Args)]
struct SampleArgs {
    #[arg(long)]
    course: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 100)]
    n: usize,
    /// Override the model's preview time.
    #[arg(long)]
    preview: Option<f64>,
    #[command(flatten)]
    sampling: Sampling,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    course: PathBuf,
    /// Generating model (default: reported median parameters, preview 1.2 s).
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    preview: Option<f64>,
    #[command(flatten)]
    sampling: Sampling,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    course: PathBuf,
    #[arg(long)]
    model: PathBuf,
    /// Held-out log; one case starts at each obstacle segment.
    #[arg(long)]
    log: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value_t = 100)]
    n: usize,
    #[arg(long, value_delimiter = ',', default_value = "1,2,5,10,20")]
    horizons: Vec<f64>,
    #[arg(long, default_value_t = 0.1)]
    dt: f64,
    /// Single case starting at the first log row.
    #[arg(long)]
    no_segment: bool,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[arg(long)]
    course: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Swept parameter, one of A..E.
    #[arg(long)]
    param: String,
    #[arg(long, default_value_t = 20)]
    n: usize,
    /// Quantile table CSV (default: the reported table).
    #[arg(long)]
    quantiles: Option<PathBuf>,
    #[arg(long, default_value_t = 1.2)]
    preview: f64,
    #[command(flatten)]
    sampling: Sampling,
}

#[derive(Debug, Args)]
struct PlotArgs {
    #[arg(long)]
    course: PathBuf,
    /// Reference log drawn on top.
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Trajectory CSV files.
    trajectories: Vec<PathBuf>,
}

fn init_logging(verbose: bool) {
    let default = if verbose { "info" } else { "warn" };
    let filter = tracing_subscriber::EnvFilter::try_from_default_env()
        .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new(default));
    tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .with_target(false)
        .init();
}

fn init_threads() -> Result<(), commands::CliError> {
    let Ok(value) = std::env::var("RISKFIELD_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| commands::CliError::usage(format!("RISKFIELD_THREADS must be a positive integer, got {value:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| commands::CliError::runtime(e.to_string()))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_logging(cli.verbose);
    let result = init_threads().and_then(|()| commands::run(cli.command, cli.verbose));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
