use std::path::PathBuf;

use thiserror::Error;

/// Failures raised by the tensor engine.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("KL divergence is infinite: q has zero mass where p is positive")]
    InfiniteDivergence,
    #[error("parameter error: {0}")]
    Parameter(String),
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
}

impl TensorError {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        TensorError::Dimension {
            op,
            detail: detail.into(),
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("ingestion error: {message}: {}", paths_display(.paths))]
    Ingestion { message: String, paths: Vec<PathBuf> },
    #[error("data access violation: {0}")]
    Access(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn paths_display(paths: &[PathBuf]) -> String {
    paths
        .iter()
        .map(|p| p.display().to_string())
        .collect::<Vec<_>>()
        .join(", ")
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn ingestion(message: impl Into<String>, paths: Vec<PathBuf>) -> Self {
        Error::Ingestion {
            message: message.into(),
            paths,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
