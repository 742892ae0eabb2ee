//! Library side of the `ocl` command: run configuration, subcommands and
//! their on-disk artifacts.

pub mod commands;
pub mod config;

pub use config::{DatasetSource, RunConfig};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("training diverged at step {step} (epoch {epoch}): {detail}")]
    Diverged { step: u64, epoch: usize, detail: String },
    #[error("verification failed: {0}")]
    Verification(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Diverged { .. } => 3,
            CliError::Verification(_) => 4,
            CliError::Io(_) | CliError::Other(_) => 1,
        }
    }
}

impl From<ocl_core::Error> for CliError {
    fn from(e: ocl_core::Error) -> Self {
        use ocl_core::Error as E;
        match e {
            E::Diverged { step, epoch, detail } => CliError::Diverged { step, epoch, detail },
            E::InvalidConfig(m) => CliError::Config(m),
            E::Io(io) => CliError::Io(io),
            other => CliError::Other(other.to_string()),
        }
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Other(format!("json: {e}"))
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Other(format!("csv: {e}"))
    }
}
