//! Scenario runner for the non-Markovian cavity-QED toolkit: configuration
//! ingestion, a bundled figure-reproduction library, CSV emission, and
//! stability-report printing.
//!
//! The binary `nmq` wraps [`scenario::run`]; everything observable through
//! the command line is reachable through this library so integration tests
//! can exercise it without spawning processes.

use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub mod config;
pub mod emit;
pub mod reproduce;
pub mod scenario;

pub use config::{parse_config, ConfigError, ScenarioConfig, ScenarioKind};
pub use reproduce::Figure;
pub use scenario::{run, Artifacts};

/// Anything a scenario can fail with, partitioned by exit code: configuration
/// problems exit 2, numerical failures 3, divergence guards 4.
#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    /// Configuration-class problem detected outside the parser (CLI argument
    /// combinations, initial states a model rejects, invalid steppers).
    #[error("{detail}")]
    InvalidInput { detail: String },
    #[error("cannot write {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("numerical failure in scenario '{scenario}': {detail}")]
    Numerical { scenario: String, detail: String },
    /// An oracle comparison exceeded its tolerance; the deviation table was
    /// still written for inspection.
    #[error(
        "oracle check failed: {name} deviates by {max_dev:e} (tolerance {tol:e}); table at {table}"
    )]
    CheckFailed { table: PathBuf, name: String, max_dev: f64, tol: f64 },
    #[error("divergence detected in scenario '{scenario}': {detail}")]
    Divergence { scenario: String, detail: String },
}

impl CliError {
    /// Process exit code: 0 is reserved for success, 1 never emitted.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::InvalidInput { .. } | CliError::Io { .. } => 2,
            CliError::Numerical { .. } | CliError::CheckFailed { .. } => 3,
            CliError::Divergence { .. } => 4,
        }
    }
}
