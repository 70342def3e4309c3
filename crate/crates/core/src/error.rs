use std::path::PathBuf;

use thiserror::Error;

/// Every failure the library reports.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("token id {id} outside vocabulary of size {size}")]
    Vocabulary { id: usize, size: usize },

    #[error("unknown token {0:?}")]
    UnknownToken(String),

    #[error("invalid image: {0}")]
    Image(String),

    #[error("invalid model config: {0}")]
    ModelConfig(String),

    #[error("sequence too long: {what} has {len} positions, limit {max}")]
    TooLong { what: &'static str, len: usize, max: usize },

    #[error("encoder input has neither text nor image")]
    EmptyEncoderInput,

    #[error("loss {loss} is not defined for task {kind}")]
    TaskMismatch { loss: &'static str, kind: &'static str },

    #[error("no loss terms present")]
    NoLossTerms,

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("non-finite gradient in parameter {name} at index {index}: {value}")]
    NonFiniteGradient { name: String, index: usize, value: f64 },

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint has bad magic bytes")]
    BadMagic,

    #[error("checkpoint format version {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("checkpoint truncated while reading {0}")]
    Truncated(&'static str),

    #[error("checkpoint parameter {name}: shape {found:?} does not match model shape {expected:?}")]
    ShapeMismatch { name: String, found: Vec<usize>, expected: Vec<usize> },

    #[error("checkpoint is malformed: {0}")]
    Malformed(String),

    #[error("parse error at {path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn dim_err<T>(op: &'static str, detail: impl Into<String>) -> Result<T> {
    Err(Error::Dimension { op, detail: detail.into() })
}
