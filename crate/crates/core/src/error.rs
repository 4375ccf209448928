use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("non-finite value in {context}")]
    NonFinite { context: String },
    #[error("non-finite state at step {step}")]
    NonFiniteStep { step: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("training diverged: loss non-finite for {0} consecutive updates")]
    Diverged(usize),
    #[error("{0}")]
    Invalid(String),
    #[error("no minima found in search box")]
    NoMinima,
    #[error("replay buffer is empty")]
    EmptyBuffer,
    #[error("empty ensemble")]
    EmptyEnsemble,
    #[error("no path hit the target in {budget} proposals (acceptance rate < {upper_bound:.3e} at 95%)")]
    NoAcceptance { budget: u64, upper_bound: f64 },
    #[error("path {0} does not hit the target")]
    NotHitting(u64),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error(transparent)]
    Autodiff(#[from] autodiff::AdError),
}

pub type Result<T, E = CoreError> = std::result::Result<T, E>;

impl CoreError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CoreError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        CoreError::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
