//! Configuration, data, experiment orchestration and reporting.

pub mod config;
pub mod io;
pub mod plots;
pub mod runs;
pub mod study;

use thiserror::Error;

pub use config::ExperimentConfig;

use crate::fgn::FgnError;
use crate::ml::MlError;
use crate::pf::PfError;
use crate::pmcmc::PmcmcError;
use crate::sde::SdeError;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error("malformed CSV: {0}")]
    MalformedCsv(String),
    #[error("expected time index {expected}, found {found}")]
    NonContiguousTime { expected: usize, found: usize },
    #[error("rate fit needs at least {needed} points, got {got}")]
    InsufficientPoints { needed: usize, got: usize },
    #[error("I/O error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error(transparent)]
    Fgn(#[from] FgnError),
    #[error(transparent)]
    Sde(#[from] SdeError),
    #[error(transparent)]
    Filter(#[from] PfError),
    #[error(transparent)]
    Chain(#[from] PmcmcError),
    #[error(transparent)]
    Multilevel(#[from] MlError),
}

impl HarnessError {
    /// Process exit code: 2 for configuration and input problems, 3 for
    /// numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_)
            | HarnessError::MalformedCsv(_)
            | HarnessError::NonContiguousTime { .. }
            | HarnessError::Io { .. } => 2,
            HarnessError::Chain(PmcmcError::Io(_) | PmcmcError::Csv(_) | PmcmcError::Sidecar(_)) => 2,
            _ => 3,
        }
    }

    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        HarnessError::Io { path: path.display().to_string(), source }
    }
}

/// Runs `f` on a pool of `workers` threads.
pub fn with_workers<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> T {
    match rayon::ThreadPoolBuilder::new().num_threads(workers.max(1)).build() {
        Ok(pool) => pool.install(f),
        Err(_) => f(),
    }
}
