mod artifacts;
mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use stvisit_core::Error as CoreError;

#[derive(Parser, Debug)]
#[command(
    name = "stvisit",
    version,
    about = "Probabilistic multi-category visit forecasting on a spatial graph"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset bundle.
    GenData(CommonArgs),
    /// Train a model variant and write the checkpoint and loss history.
    Train(CommonArgs),
    /// Fit the conformal margin on the calibration split.
    Calibrate(CommonArgs),
    /// Score the test split and write reports and curves.
    Eval(CommonArgs),
    /// Write calibrated forecasts for one window.
    Predict(CommonArgs),
}

#[derive(Args, Debug, Clone)]
pub struct CommonArgs {
    /// Run configuration (JSON).
    #[arg(long)]
    pub config: PathBuf,
    /// Dataset bundle directory; overrides `paths.data`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output directory; overrides `paths.out`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overrides `seed` (and `data.seed` for gen-data).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Model variant, e.g. full, wo-stce, wo-gmamba.
    #[arg(long)]
    pub variant: Option<String>,
    /// Miscoverage level; overrides `uq.alpha`.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Window index for predict.
    #[arg(long)]
    pub window: Option<usize>,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error("{0}")]
    Usage(String),
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Core(e) => match e {
                CoreError::Config { .. } | CoreError::Parameter(_) => 2,
                CoreError::Io(_)
                | CoreError::Format(_)
                | CoreError::Json(_)
                | CoreError::Csv(_) => 3,
                CoreError::NonFinite { .. }
                | CoreError::NumericOverflow { .. }
                | CoreError::Shape { .. }
                | CoreError::Contract(_) => 4,
            },
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(&a),
        Command::Train(a) => commands::train(&a),
        Command::Calibrate(a) => commands::calibrate(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Predict(a) => commands::predict(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e);
            ExitCode::from(e.exit_code())
        }
    }
}
