use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty reduction")]
    EmptyReduction,

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("input too short: need at least {min} entries, got {got}")]
    TooShort { min: usize, got: usize },

    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    ShapeMismatch {
        context: &'static str,
        expected: String,
        got: String,
    },

    #[error("degenerate embedding: row {row} has pre-normalization norm {norm:e}")]
    DegenerateEmbedding { row: usize, norm: f64 },

    #[error("no negatives")]
    NoNegatives,

    #[error("anchor state {index} used before its first update")]
    Uninitialized { index: usize },

    #[error("batch size {batch} invalid for dataset of {n} samples")]
    InvalidBatch { batch: usize, n: usize },

    #[error("grid oracle limited to m <= 3 (got m = {m})")]
    GridLimited { m: usize },

    #[error("bisection did not converge after {iterations} iterations (kl residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("dataset of {n} samples exceeds the reference cap of {cap}")]
    TooLarge { n: usize, cap: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("malformed {what}: {detail}")]
    Malformed { what: &'static str, detail: String },

    #[error("i/o error on {path}: {source}")]
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

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::InvalidConfig(msg.into())
    }
}
