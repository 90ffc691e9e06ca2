//! Command-line driver: train / ablate / eval / generate / synth.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data or checkpoint error,
//! 4 numeric failure.

pub mod commands;
pub mod config;
pub mod manifest;

use std::path::PathBuf;

use clap::{Parser, Subcommand};
use thiserror::Error;

use yae_core::dataio::DataError;
use yae_core::eval::EvalError;
use yae_core::loss::LossError;
use yae_core::nn::NnError;
use yae_core::ssim::SsimError;
use yae_core::trainer::TrainError;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(m) => CliError::Config(m),
            TrainError::Data(d) => CliError::Data(d.to_string()),
            TrainError::NonFinite { .. } => CliError::Numeric(e.to_string()),
            TrainError::Loss(LossError::NonFinite { .. }) => CliError::Numeric(e.to_string()),
            TrainError::EmptyTestSet => CliError::Data(e.to_string()),
            TrainError::Nn(n) => n.into(),
            TrainError::Loss(LossError::Nn(n)) => n.into(),
        }
    }
}

impl From<NnError> for CliError {
    fn from(e: NnError) -> Self {
        match e {
            NnError::Checkpoint(_) => CliError::Data(e.to_string()),
            _ => CliError::Numeric(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::DuplicateSeeds(_) => CliError::Config(e.to_string()),
            EvalError::Data(d) => CliError::Data(d.to_string()),
            EvalError::Nn(n) => n.into(),
            EvalError::MemberBelowThreshold { .. } | EvalError::Ssim(_) => {
                CliError::Numeric(e.to_string())
            }
        }
    }
}

impl From<SsimError> for CliError {
    fn from(e: SsimError) -> Self {
        CliError::Numeric(e.to_string())
    }
}

#[derive(Parser)]
#[command(name = "yae", version, about = "Y-Autoencoder experiments: disentangled style/content training and evaluation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Train one model from a config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Override the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the config's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Resume from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Run the (lambda_e, lambda_i) ablation matrix and summarize.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        /// Conditions as "le,li" pairs separated by ';' (default the 2x2 grid).
        #[arg(long)]
        conditions: Option<String>,
        /// Comma-separated seeds (default 0,1,2).
        #[arg(long)]
        seeds: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score checkpoints with the classifier-ensemble swap protocol.
    Eval {
        #[arg(long)]
        config: PathBuf,
        /// One or more checkpoints (several = seeds of one method, aggregated).
        #[arg(long, required = true)]
        checkpoint: Vec<PathBuf>,
        /// Override eval.fraction.
        #[arg(long)]
        fraction: Option<f64>,
        /// Method label for the results row.
        #[arg(long)]
        method: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render a PNG grid: inputs in column 0, one column per content class.
    Generate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Output PNG path (default <out dir>/grid.png).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Number of input rows (default emit.grid_rows).
        #[arg(long)]
        rows: Option<usize>,
        /// Seed for choosing input rows.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Materialize the procedural digit corpus as IDX files.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 60000)]
        train: usize,
        #[arg(long, default_value_t = 10000)]
        test: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// Parse and dispatch; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            // clap handles --help/--version with success exits
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match commands::dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
