use thiserror::Error;

/// Errors raised by the tensor engine, the models, and the adaptation loop.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("domain error in {op}: input {value} at index {index}")]
    Domain {
        op: &'static str,
        index: usize,
        value: f64,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("format error at byte {offset}: {reason}")]
    Format { offset: usize, reason: String },

    #[error("precision mismatch: file holds {found}, run expects {expected}")]
    PrecisionMismatch {
        expected: &'static str,
        found: &'static str,
    },

    #[error("unsupported parameter subset {subset}: {reason}")]
    UnsupportedSubset { subset: String, reason: String },

    #[error("non-finite loss at step {step} (timesteps {timesteps:?})")]
    NonFinite { step: usize, timesteps: Vec<usize> },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn contract(detail: impl Into<String>) -> Self {
        Error::Contract(detail.into())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
