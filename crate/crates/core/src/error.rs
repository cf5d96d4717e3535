use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("ill-conditioned fit: {0}")]
    IllConditionedFit(String),

    #[error("invalid covariance: {0}")]
    InvalidCovariance(String),

    #[error("mixture mismatch: {0}")]
    MixtureMismatch(String),

    #[error("malformed file {path}: {reason}")]
    MalformedFile { path: PathBuf, reason: String },

    #[error("parse error: {0}")]
    Parse(String),

    #[error("non-finite objective after {iterations} iterations")]
    NonFiniteObjective { iterations: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Short machine-readable category used by the CLI.
    pub fn category(&self) -> &'static str {
        match self {
            Error::InvalidArgument(_) => "invalid-argument",
            Error::IllConditionedFit(_) => "ill-conditioned-fit",
            Error::InvalidCovariance(_) => "invalid-covariance",
            Error::MixtureMismatch(_) => "mixture-mismatch",
            Error::MalformedFile { .. } => "malformed-file",
            Error::Parse(_) => "parse-error",
            Error::NonFiniteObjective { .. } => "non-finite-objective",
            Error::Io(_) => "io",
            Error::Csv(_) => "malformed-file",
        }
    }
}
