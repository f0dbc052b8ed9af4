//! `koopnav`: offline training, calibration and closed-loop experiments.
//!
//! Exit codes: 0 success, 2 usage, 3 missing input file, 4 runtime failure.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use koopnav::harness::{CalibConfig, ControllerSettings, EmitFormat, TrainConfig};

#[derive(Debug, Parser)]
#[command(
    name = "koopnav",
    version,
    about = "Koopman-model MPC with conformal safety margins for unicycle navigation",
    long_about = "Koopman-model MPC with conformal safety margins for unicycle navigation.\n\n\
        Artifacts live in a run directory <out>/<run>. Settings are layered: built-in \
        defaults, then <out>/<run>/config.json, then --config, then explicit flags. The \
        effective settings are written back to <out>/<run>/config.json.",
    arg_required_else_help = true
)]
pub struct Cli {
    /// Root directory that holds run directories
    #[arg(long, env = "KOOPNAV_OUT", default_value = "runs", global = true)]
    pub out: PathBuf,

    /// Run name; artifacts go to <out>/<run>
    #[arg(long, default_value = "default", global = true)]
    pub run: String,

    /// JSON settings merged over <out>/<run>/config.json [default: none]
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Log filter (error, warn, info, debug, trace or env_logger syntax)
    #[arg(long, default_value = "warn", global = true)]
    pub log_level: String,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Roll the plant under an excitation policy and write transitions CSV
    Collect(CollectArgs),
    /// Fit the lifted linear model from transitions
    Fit(FitArgs),
    /// Collect closed-loop prediction errors and compute the safety margin
    Calibrate(CalibrateArgs),
    /// Run one scenario and seed in closed loop
    Run(RunArgs),
    /// Scripted multi-seed experiments
    #[command(subcommand, arg_required_else_help = true)]
    Experiment(ExperimentKind),
}

#[derive(Debug, Args)]
pub struct CollectArgs {
    /// Episodes to roll out
    #[arg(long, default_value_t = TrainConfig::default().episodes)]
    pub episodes: usize,
    /// Steps per episode
    #[arg(long, default_value_t = TrainConfig::default().steps)]
    pub steps: usize,
    /// RNG seed
    #[arg(long, default_value_t = TrainConfig::default().seed)]
    pub seed: u64,
    /// Output CSV [default: <out>/<run>/transitions.csv]
    #[arg(short, long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    /// Transitions CSV [default: <out>/<run>/transitions.csv]
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Observable dictionary (default11, trig5)
    #[arg(long = "dict", id = "dictionary", default_value_t = TrainConfig::default().dictionary)]
    pub dictionary: String,
    /// Ridge regularization
    #[arg(long, default_value_t = TrainConfig::default().ridge)]
    pub ridge: f64,
    /// Body-frame training window in transitions; 0 fits in world coordinates
    #[arg(long, default_value_t = TrainConfig::default().window)]
    pub window: usize,
    /// Stride between training windows
    #[arg(long, default_value_t = TrainConfig::default().stride)]
    pub stride: usize,
    /// Output model [default: <out>/<run>/model.json]
    #[arg(short, long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    /// Model JSON [default: <out>/<run>/model.json]
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Miscoverage level; the margin holds with probability 1 - alpha
    #[arg(long, default_value_t = 0.02)]
    pub alpha: f64,
    /// Closed-loop calibration scenarios
    #[arg(long, default_value_t = CalibConfig::default().scenarios)]
    pub scenarios: usize,
    /// Steps per calibration scenario
    #[arg(long, default_value_t = CalibConfig::default().steps)]
    pub steps: usize,
    /// RNG seed for calibration scenarios
    #[arg(long, default_value_t = CalibConfig::default().seed)]
    pub seed: u64,
    /// Random moving obstacles per calibration scenario
    #[arg(long, default_value_t = CalibConfig::default().obstacles)]
    pub obstacles: usize,
    /// Lipschitz constant of the constraint functions
    #[arg(long, default_value_t = CalibConfig::default().lipschitz)]
    pub lipschitz: f64,
    /// Additive slack on the margin
    #[arg(long, default_value_t = CalibConfig::default().epsilon)]
    pub epsilon: f64,
    /// Output calibration [default: <out>/<run>/calibration.json]
    #[arg(short, long)]
    pub output: Option<PathBuf>,
    /// Output calibration pairs CSV [default: <out>/<run>/calibration_pairs.csv]
    #[arg(long)]
    pub pairs: Option<PathBuf>,
    /// Also calibrate j-step-ahead errors and use one margin per predicted step
    #[arg(long, action = clap::ArgAction::Set, default_value_t = CalibConfig::default().per_step)]
    pub per_step: bool,
    /// Output multi-step pairs CSV, written with --per-step true [default: <out>/<run>/calibration_horizon_pairs.csv]
    #[arg(long)]
    pub horizon_pairs: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Format {
    Csv,
    Json,
}

impl From<Format> for EmitFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Csv => EmitFormat::Csv,
            Format::Json => EmitFormat::Json,
        }
    }
}

/// Inputs and output options shared by `run` and `experiment`.
#[derive(Debug, Args)]
pub struct ClosedLoopArgs {
    /// Model JSON [default: <out>/<run>/model.json]
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Calibration pairs CSV [default: <out>/<run>/calibration_pairs.csv]
    #[arg(long)]
    pub pairs: Option<PathBuf>,
    /// Multi-step pairs CSV, read when per-step margins are enabled [default: <out>/<run>/calibration_horizon_pairs.csv]
    #[arg(long)]
    pub horizon_pairs: Option<PathBuf>,
    /// Trajectory file format
    #[arg(long, value_enum, default_value = "csv")]
    pub format: Format,
    /// Record wall-clock solve times; false makes outputs byte-reproducible
    #[arg(long, action = clap::ArgAction::Set, default_value_t = ControllerSettings::default().log_solve_time)]
    pub log_solve_time: bool,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Built-in scenario name (fig2, fig3, fig4, free) or scenario JSON path
    #[arg(long, default_value = "fig2")]
    pub scenario: String,
    /// Seed for the scenario's randomization
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Calibration JSON [default: <out>/<run>/calibration.json]
    #[arg(long)]
    pub calibration: Option<PathBuf>,
    /// Recompute the margin at this miscoverage level from the pairs [default: calibration's alpha]
    #[arg(long, conflicts_with = "no_tightening")]
    pub alpha: Option<f64>,
    /// Run with zero margin [default: false]
    #[arg(long)]
    pub no_tightening: bool,
    /// Output directory [default: <out>/<run>]
    #[arg(short, long)]
    pub output: Option<PathBuf>,
    #[command(flatten)]
    pub common: ClosedLoopArgs,
}

#[derive(Debug, Subcommand)]
pub enum ExperimentKind {
    /// Same scenario at 98%, 50%, 10% confidence and without tightening
    ConfidenceSweep(ExperimentArgs),
    /// Reference governor against a constant goal reference
    RgVsSoft(ExperimentArgs),
    /// The scenario at its configured confidence, once per seed
    Fig2(ExperimentArgs),
}

#[derive(Debug, Args)]
pub struct ExperimentArgs {
    /// Built-in scenario name or scenario JSON path [default: fig3 for confidence-sweep, fig4 for rg-vs-soft, fig2 for fig2]
    #[arg(long)]
    pub scenario: Option<String>,
    /// Seeds per arm
    #[arg(long, default_value_t = 10)]
    pub seeds: u64,
    /// First seed
    #[arg(long, default_value_t = 0)]
    pub seed_base: u64,
    /// Override the scenario's miscoverage level (ignored by confidence-sweep) [default: scenario's]
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Output directory [default: <out>/<run>/<experiment>]
    #[arg(short, long)]
    pub output: Option<PathBuf>,
    #[command(flatten)]
    pub common: ClosedLoopArgs,
}

fn main() -> ExitCode {
    let matches = Cli::command().get_matches();
    let cli = Cli::from_arg_matches(&matches).unwrap_or_else(|e| e.exit());
    env_logger::Builder::new()
        .parse_filters(&cli.log_level)
        .init();
    match commands::dispatch(&cli, &matches) {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            eprintln!("error: {failure}");
            ExitCode::from(failure.code())
        }
    }
}
