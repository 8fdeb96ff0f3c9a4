use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A configuration value is out of its admissible range.
    #[error("invalid configuration: {field}: {reason}")]
    Config { field: String, reason: String },

    /// Caller violated a documented precondition (shape mismatch, bad index, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Operation not allowed in the current session phase.
    #[error("phase conflict: {0}")]
    Phase(String),

    /// Expert response rejected (out of range or not a pending query).
    #[error("invalid response: {0}")]
    InvalidResponse(String),

    #[error("numeric overflow in {context}")]
    NumericOverflow { context: String },

    /// A particle update produced NaN or infinity.
    #[error("non-finite {term} for particle {particle} at step {step}")]
    NonFinite {
        particle: usize,
        term: &'static str,
        step: usize,
    },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
}
