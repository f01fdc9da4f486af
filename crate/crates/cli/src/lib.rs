//! Experiment runner behind the `dcbf` binary: configuration schema,
//! bundled presets, execution and assertion checks.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checks;
pub mod config;
pub mod presets;
pub mod run;

pub use config::{ExperimentConfig, ExperimentKind, Plan};
pub use run::{run_experiment, RunOptions, RunOutcome};

/// Errors that end a run before the assertions are evaluated.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config(_) => 2,
            CliError::Internal(_) => 3,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Config(_) => "config",
            CliError::Internal(_) => "internal",
        }
    }

    /// One-line JSON error record.
    pub fn record(&self) -> serde_json::Value {
        serde_json::json!({
            "error": {
                "kind": self.kind(),
                "exit_code": self.exit_code(),
                "message": self.to_string(),
            }
        })
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Internal(format!("i/o: {e}"))
    }
}

impl From<dcbf_mpc::Error> for CliError {
    fn from(e: dcbf_mpc::Error) -> Self {
        CliError::Internal(e.to_string())
    }
}
