//! Command-line workbench: experiment configs, checkpoints and report export.
//!
//! [`run_command`] is the whole CLI; the `codyra` binary only forwards its
//! arguments and exit status.

pub mod checkpoint;
mod commands;
pub mod config;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::Parser;
use codyra_core::analysis::AnalysisError;
use codyra_core::encoder::ModelError;
use codyra_core::metrics::MetricsError;
use codyra_core::synth::SynthError;
use codyra_core::trainer::TrainError;
use thiserror::Error;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CheckpointError};
pub use commands::{vit_b16, Cli, Command};
pub use config::{AnalysisConfig, ExperimentConfig};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("{}: {1}", .0.display())]
    Io(PathBuf, #[source] std::io::Error),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("JSON: {0}")]
    Json(#[from] serde_json::Error),
}

impl CliError {
    /// Stable tag used in the error JSON.
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Config(_) => "config",
            CliError::Io(..) => "io",
            CliError::Checkpoint(CheckpointError::Version { .. }) => "checkpoint_version",
            CliError::Checkpoint(CheckpointError::Checksum { .. }) => "checkpoint_checksum",
            CliError::Checkpoint(_) => "checkpoint",
            CliError::Train(_) => "train",
            CliError::Analysis(_) => "analysis",
            CliError::Metrics(_) => "metrics",
            CliError::Synth(_) => "data",
            CliError::Model(_) => "model",
            CliError::Json(_) => "json",
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({ "error": { "kind": self.kind(), "message": self.to_string() } })
    }
}

/// Parses `argv` (program name first) and runs the subcommand. Failures are
/// reported as one line of JSON on stderr with a nonzero status.
pub fn run_command<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let err = CliError::Usage(e.to_string().trim().to_string());
            eprintln!("{}", err.to_json());
            return 2;
        }
    };
    match commands::execute(cli.command) {
        Ok(()) => 0,
        Err(err) => {
            eprintln!("{}", err.to_json());
            1
        }
    }
}
