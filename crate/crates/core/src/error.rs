use std::path::PathBuf;

use thiserror::Error;

use crate::types::ValidationReport;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid dataset: {0}")]
    InvalidDataset(ValidationReport),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("not a probability vector: {0}")]
    NotOnSimplex(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("ground-truth labels are required but absent")]
    MissingTruth,

    #[error("malformed file {}: {msg}", path.display())]
    Format { path: PathBuf, msg: String },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("oracle size guard exceeded: {0}")]
    SizeGuard(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }
}

impl From<ValidationReport> for Error {
    fn from(report: ValidationReport) -> Self {
        Error::InvalidDataset(report)
    }
}
