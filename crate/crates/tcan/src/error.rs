//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A cascade file line could not be parsed. Line numbers are 1-based.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    /// An input violated a documented precondition.
    #[error("invalid input: {0}")]
    Validation(String),

    /// Tensor operands had incompatible shapes.
    #[error("shape mismatch in `{op}`: {detail}")]
    Shape { op: &'static str, detail: String },

    /// An operation produced NaN or Inf. The tape aborts immediately so the
    /// failing op is named rather than the downstream symptom.
    #[error("non-finite value produced by op `{op}`")]
    NonFinite { op: &'static str },

    /// Training or solving diverged.
    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// True for failures of the NaN/divergence class, as opposed to bad
    /// inputs or I/O trouble. The CLI maps these onto distinct exit codes.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::NonFinite { .. } | Error::Numerical(_))
    }
}
