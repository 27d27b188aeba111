use thiserror::Error;

/// Errors produced by kernels, cells, engines, and the harness.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {details}")]
    Dimension { op: &'static str, details: String },

    #[error("pattern violation in {op}: {details}")]
    Pattern { op: &'static str, details: String },

    #[error("non-finite value in {what}")]
    NonFinite { what: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("flush_window called on an empty tape")]
    EmptyTape,

    #[error("accumulator does not match engine: expected {expected}, got {got}")]
    AccumulatorMismatch {
        expected: &'static str,
        got: &'static str,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn dimension(op: &'static str, details: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            details: details.into(),
        }
    }

    pub fn pattern(op: &'static str, details: impl Into<String>) -> Self {
        Error::Pattern {
            op,
            details: details.into(),
        }
    }
}
