//! Configuration, orchestration and reporting behind the `mfg` binary.

pub mod config;
pub mod report;
pub mod run;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("no oracle: {0}")]
    NoOracle(String),
    #[error("solver failure: {0}")]
    Solver(#[from] mfg_core::Error),
    #[error("assumption validation failed: {0}")]
    Validation(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl CliError {
    /// 1 for solver failures, 2 for configuration problems (a missing
    /// oracle included), 3 for failed assumption checks.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Solver(_) | CliError::Io(_) => 1,
            CliError::Config(_) | CliError::NoOracle(_) => 2,
            CliError::Validation(_) => 3,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Io(e.to_string())
    }
}
