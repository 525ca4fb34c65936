use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("dense materialization refused: dimension {dim} exceeds guard {limit}")]
    SizeGuard { dim: usize, limit: usize },

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("solver breakdown: {0}")]
    Breakdown(String),

    #[error("two-grid iteration diverged after {cycles} cycles (relres {relres:.3e})")]
    Diverged { cycles: usize, relres: f64 },

    #[error("block {block} has no columns of chirality {chirality:+}; blocking too fine")]
    EmptyBlock { block: usize, chirality: i8 },

    #[error("inner solves stagnated at shift tau={tau}; retry with a larger shift")]
    ShiftTooSmall { tau: f64 },

    #[error("spurious mode {index}: |lambda|={value:.3e} below {threshold:.3e}")]
    SpuriousMode {
        index: usize,
        value: f64,
        threshold: f64,
    },

    #[error("singular matrix: {0}")]
    Singular(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
