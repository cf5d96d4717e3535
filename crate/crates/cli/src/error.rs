use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = CliError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),

    #[error("{what} not found at {path} (run `ccmotion {stage}` first)")]
    MissingArtifact {
        what: &'static str,
        path: PathBuf,
        stage: &'static str,
    },

    #[error("{path}: {reason}")]
    SchemaMismatch { path: PathBuf, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Core(#[from] ccmotion::Error),
}

impl CliError {
    pub fn category(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::MissingArtifact { .. } => "missing-artifact",
            CliError::SchemaMismatch { .. } => "schema-mismatch",
            CliError::Io { .. } => "io",
            CliError::Core(e) => e.category(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Core(ccmotion::Error::from(e))
    }
}
