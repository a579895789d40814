//! Command-line companion to `bonsai-core`: run configuration, dataset
//! loading and caching, run-directory artifacts, aggregate reports, and the
//! command implementations behind the `bonsai` binary.

pub mod artifacts;
pub mod commands;
pub mod config;
pub mod dataio;
pub mod report;

use std::fmt;

/// Errors carrying the process exit code they map to: 1 for usage problems,
/// 2 for runtime failures. Failed-to-converge (exit 3) is signaled by the
/// command result, not an error.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl CliError {
    pub fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

impl std::error::Error for CliError {}

pub type CliResult<T> = Result<T, CliError>;

pub fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

pub fn runtime(msg: impl fmt::Display) -> CliError {
    CliError::Runtime(msg.to_string())
}
