//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Dimension disagreement between operands; both shapes are reported.
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// NaN/Inf surfaced; the producing operation is identified so training
    /// divergence can be traced to its source.
    #[error("non-finite value produced by {op}{detail}")]
    NonFinite { op: &'static str, detail: String },

    /// Input outside the operation's documented domain (e.g. log of a
    /// non-positive value).
    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },

    #[error("configuration error: {0}")]
    Config(String),

    /// A caller broke an API contract (non-scalar loss, mode mismatch, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Evaluation-protocol preconditions not met (missing class, too few
    /// identities or tools, ...).
    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("generation error: {0}")]
    Generation(String),

    #[error("incompatible artifacts: {0}")]
    Incompatible(String),

    #[error("parse error in {path}: {detail}")]
    Parse { path: String, detail: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn non_finite(op: &'static str) -> Self {
        Error::NonFinite {
            op,
            detail: String::new(),
        }
    }
}
