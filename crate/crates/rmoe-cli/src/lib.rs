//! Command implementations behind the `rmoe` binary: data generation,
//! two-phase training, the from-scratch mixture ablation, evaluation, grid
//! sweeps, and gain reports.
//!
//! Exit-code contract (stable for scripting): 0 success, 2 usage error,
//! 3 runtime/numeric failure.

pub mod args;
pub mod commands;
pub mod config;
pub mod manifest;

/// Errors split by exit code: usage errors exit 2, runtime failures exit 3.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => m,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Runtime(m) => write!(f, "error: {m}"),
        }
    }
}

pub(crate) fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

pub(crate) fn runtime(msg: impl std::fmt::Display) -> CliError {
    CliError::Runtime(msg.to_string())
}
