//! `traffic-cl`: ingest trajectory logs, generate synthetic scenes, measure
//! scenario divergence, train continual predictors and tabulate results.
//!
//! Exit codes: 0 success, 2 bad input or configuration, 3 not enough data,
//! 4 numerical failure, 1 anything else.

mod commands;
mod config;
mod report;

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use thiserror::Error;

use traffic_cl::error::ErrorClass;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Core(#[from] traffic_cl::Error),
    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: traffic_cl::Error,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("missing artifacts: {0}")]
    MissingArtifacts(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn io(path: impl AsRef<Path>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.as_ref().to_path_buf(),
            source,
        }
    }

    pub fn context(context: impl Display, source: impl Into<traffic_cl::Error>) -> Self {
        CliError::Context {
            context: context.to_string(),
            source: source.into(),
        }
    }

    fn core(&self) -> Option<&traffic_cl::Error> {
        match self {
            CliError::Core(e) | CliError::Context { source: e, .. } => Some(e),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            CliError::Config(_) => "Config",
            CliError::MissingArtifacts(_) => "MissingArtifacts",
            CliError::Io { .. } => "Io",
            _ => self.core().map_or("Other", traffic_cl::Error::name),
        }
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) | CliError::MissingArtifacts(_) => 2,
            CliError::Io { .. } => 1,
            _ => match self.core().map(traffic_cl::Error::class) {
                Some(ErrorClass::Input) => 2,
                Some(ErrorClass::InsufficientData) => 3,
                Some(ErrorClass::Numerical) => 4,
                _ => 1,
            },
        }
    }
}

impl From<traffic_cl::data::DataError> for CliError {
    fn from(e: traffic_cl::data::DataError) -> Self {
        CliError::Core(e.into())
    }
}

#[derive(Debug, Parser)]
#[command(name = "traffic-cl", version, about = "Continual learning for vehicle trajectory prediction")]
struct Cli {
    /// Log more (repeat for debug output).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Parse a trajectory CSV, window it into samples and persist a dataset.
    Ingest(commands::IngestArgs),
    /// Generate a synthetic scenario and persist it as a dataset.
    Synth(commands::SynthArgs),
    /// Fit per-scenario mixture density networks and compute the divergence matrices.
    MeasureDivergence(commands::DivergenceArgs),
    /// Train over the configured scenario sequence.
    Train(commands::TrainArgs),
    /// Evaluate a checkpoint on the test split of datasets.
    Evaluate(commands::EvaluateArgs),
    /// Tabulate one or more run directories side by side.
    Report(report::ReportArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = match &cli.command {
        Command::Ingest(a) => commands::ingest(a),
        Command::Synth(a) => commands::synth(a),
        Command::MeasureDivergence(a) => commands::measure_divergence(a),
        Command::Train(a) => commands::train(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::Report(a) => report::report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error [{}]: {e}", e.name());
            ExitCode::from(e.exit_code())
        }
    }
}
