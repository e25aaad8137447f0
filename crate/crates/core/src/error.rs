use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("matrix must be square, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },

    #[error("matrix is not symmetric at ({row}, {col})")]
    NotSymmetric { row: usize, col: usize },

    #[error("matrix is not positive definite (pivot {pivot} = {value:e})")]
    NotPositiveDefinite { pivot: usize, value: f64 },

    #[error("non-finite entry in input")]
    NonFiniteInput,

    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("n = {n} exceeds the direct/eigensolve cap of {cap}")]
    TooLargeForDirect { n: usize, cap: usize },

    #[error("invalid partition: {0}")]
    InvalidPartition(String),

    #[error("index {index} out of range (len {len})")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("corrupt store file {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },

    #[error("invalid strategy configuration: {0}")]
    InvalidStrategyConfig(String),

    #[error("block {block} has a singular row Gram matrix")]
    SingularBlockGram { block: usize },

    #[error("direction matrix is rank deficient")]
    RankDeficient,

    #[error("oracle-backed and oracle-free updates disagree by {0:e}")]
    RouteMismatch(f64),

    #[error("iterate became non-finite at iteration {k}")]
    NonFinite { k: usize },

    #[error("invalid node assignment: {0}")]
    InvalidAssignment(String),

    #[error("parse error: {0}")]
    Parse(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
