//! Command-line front end: simulation harness, CSV estimation,
//! hyperparameter tuning, and rolling-window estimation.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use paneldml::Error;

#[derive(Parser)]
#[command(
    name = "paneldml",
    about = "Debiased machine learning for average derivatives in fixed-effects panels",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the benchmark Monte Carlo study and emit summary tables.
    Simulate(SimulateArgs),
    /// Estimate the average treatment derivative from a panel CSV.
    Estimate(EstimateArgs),
    /// Select Lasso and representer penalties by held-out loss.
    Tune(TuneArgs),
    /// Estimate over rolling time windows and fit a trend.
    Rolling(RollingArgs),
}

/// Flags shared by every subcommand. Flag values override the JSON
/// configuration file; configuration values override built-in defaults.
#[derive(Args, Clone)]
struct CommonArgs {
    /// JSON configuration file (unknown keys are rejected).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed; omitted, a fresh entropy seed is drawn and echoed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for trials and windows (default: all cores).
    #[arg(long)]
    jobs: Option<usize>,
    /// Output directory (created if missing).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Monte Carlo trials.
    #[arg(long)]
    trials: Option<usize>,
    /// Simulated panel units.
    #[arg(long)]
    units: Option<usize>,
    /// Simulated time periods.
    #[arg(long)]
    periods: Option<usize>,
    /// Simulated covariates.
    #[arg(long)]
    covariates: Option<usize>,
    /// Comma-separated methods (DML, DMLIterative, Lasso, OLSLinear, OLSPoly).
    #[arg(long)]
    methods: Option<String>,
    /// Cross-fitting folds.
    #[arg(long)]
    folds: Option<usize>,
    /// Confidence level for coverage.
    #[arg(long)]
    level: Option<f64>,
}

#[derive(Args)]
struct SchemaArgs {
    /// Unit id column name.
    #[arg(long)]
    unit_col: Option<String>,
    /// Time column name.
    #[arg(long)]
    time_col: Option<String>,
    /// Outcome column name.
    #[arg(long)]
    outcome_col: Option<String>,
    /// Treatment column name.
    #[arg(long)]
    treatment_col: Option<String>,
    /// Comma-separated covariate columns (default: headers x1..xh).
    #[arg(long)]
    covariate_cols: Option<String>,
    /// Observation weight column.
    #[arg(long)]
    weight_col: Option<String>,
}

#[derive(Args)]
struct DictArgs {
    /// Maximum per-factor power of basis terms.
    #[arg(long)]
    max_degree: Option<u32>,
    /// Interaction pairs: `treatment` (treatment-covariate only) or `all`.
    #[arg(long)]
    pairs: Option<String>,
    /// Include an intercept term (inactive after differencing).
    #[arg(long)]
    intercept: Option<bool>,
}

#[derive(Args)]
struct EstimateArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Input panel CSV.
    #[arg(long)]
    input: Option<PathBuf>,
    #[command(flatten)]
    schema: SchemaArgs,
    #[command(flatten)]
    dict: DictArgs,
    /// Comma-separated methods to estimate.
    #[arg(long)]
    methods: Option<String>,
    #[arg(long)]
    folds: Option<usize>,
    #[arg(long)]
    level: Option<f64>,
    /// Ignore observation weights even when present.
    #[arg(long)]
    no_weights: bool,
}

#[derive(Args)]
struct TuneArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Input panel CSV.
    #[arg(long)]
    input: Option<PathBuf>,
    #[command(flatten)]
    schema: SchemaArgs,
    #[command(flatten)]
    dict: DictArgs,
    /// Method whose representer solver drives the alpha loss.
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    folds: Option<usize>,
    #[arg(long)]
    no_weights: bool,
}

#[derive(Args)]
struct RollingArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Input panel CSV.
    #[arg(long)]
    input: Option<PathBuf>,
    #[command(flatten)]
    schema: SchemaArgs,
    #[command(flatten)]
    dict: DictArgs,
    /// Estimation method for every window.
    #[arg(long)]
    method: Option<String>,
    /// Window width in periods.
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    folds: Option<usize>,
    #[arg(long)]
    level: Option<f64>,
    #[arg(long)]
    no_weights: bool,
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Simulate(args) => commands::simulate::run(args),
        Command::Estimate(args) => commands::estimate::run(args),
        Command::Tune(args) => commands::tune::run(args),
        Command::Rolling(args) => commands::rolling::run(args),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) | Error::Data(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}
