use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("degenerate aggregation: weights sum to {0}")]
    DegenerateAggregation(f64),

    #[error("non-finite values in {0}")]
    Numerical(String),

    #[error("insufficient models: need more than {needed}, got {actual}")]
    InsufficientModels { needed: usize, actual: usize },

    #[error("insufficient samples: {0}")]
    InsufficientSamples(String),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("invalid format: {0}")]
    Format(String),

    #[error("invalid trigger: {0}")]
    Trigger(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid config:\n{}", .0.join("\n"))]
    Config(Vec<String>),

    #[error("output directory {0} already exists (use --force to overwrite)")]
    OutputExists(PathBuf),

    #[error("summary mismatch: {0}")]
    SummaryMismatch(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
