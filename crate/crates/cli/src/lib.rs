//! Reproduction harness around `kwscale`: TOML config in, CSV and JSON out.
//!
//! Every command writes its files under the configured output directory.
//! Outputs depend only on the config and seeds, so re-runs are
//! byte-identical.

pub mod commands;
pub mod config;
pub mod validate;

pub use config::ExperimentConfig;

/// Command failure, mapped onto the process exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Invalid flags or config (exit 2).
    #[error("config error: {0}")]
    Config(String),
    /// A run or check failed (exit 1).
    #[error("{0}")]
    Failed(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Failed(_) | CliError::Io(_) => 1,
        }
    }
}

impl From<kwscale::Error> for CliError {
    fn from(e: kwscale::Error) -> Self {
        use kwscale::Error as E;
        match e {
            E::InvalidParams(_)
            | E::InvalidPolicy(_)
            | E::InvalidWeights(_)
            | E::InvalidSchedule(_)
            | E::InvalidStep { .. }
            | E::InvalidBracket { .. }
            | E::EmptyGrid => CliError::Config(e.to_string()),
            _ => CliError::Failed(e.to_string()),
        }
    }
}
