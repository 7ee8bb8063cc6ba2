use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty routing subset")]
    EmptySubset,
    #[error("unnormalized routing weights: sum over subset is {0}")]
    UnnormalizedWeights(f64),
    #[error("empty instruction")]
    EmptyInstruction,
    #[error("degenerate features")]
    DegenerateFeatures,
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("backward requires a scalar root, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("index {index} out of range for {what} (len {len})")]
    OutOfRange {
        what: &'static str,
        index: usize,
        len: usize,
    },
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("unknown parameter path {0:?}")]
    UnknownParam(String),
    #[error("EMA shadow is not initialized")]
    UninitializedShadow,
    #[error("config line {line}: {msg}")]
    Config { line: usize, msg: String },
    #[error("malformed file {path}: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
