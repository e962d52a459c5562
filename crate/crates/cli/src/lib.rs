//! Experiment harness for data-free class unlearning: configuration files,
//! checkpoints and CSV logs, and the sweep driver behind the `unlearn` binary.

pub mod config;
pub mod experiment;

pub use config::ExperimentConfig;

/// Failure split by exit code: usage problems exit 2, everything else 1.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl From<unlearn_core::Error> for CliError {
    fn from(e: unlearn_core::Error) -> Self {
        match e {
            unlearn_core::Error::Config(_) => CliError::Usage(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}
