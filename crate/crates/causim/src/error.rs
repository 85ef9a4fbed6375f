use thiserror::Error;

/// Errors surfaced by model construction, fitting, sampling and I/O.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller-supplied value violates an operation's precondition.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// The object is not in a state that allows the requested operation.
    #[error("invalid state: {0}")]
    InvalidState(String),

    /// A linear-algebra or optimization step failed numerically.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// An observed event is impossible under the stated intensity.
    #[error("inconsistent observation: {0}")]
    InconsistentObservation(String),

    /// The thinning bound was violated by a later intensity evaluation.
    #[error("thinning inconsistency: {0}")]
    Inconsistency(String),

    /// A dataset or config file does not match its schema.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    /// A dataset violates a record invariant.
    #[error("validation error in record {record}: {msg}")]
    Validation { record: String, msg: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn invalid_argument(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn invalid_state(msg: impl Into<String>) -> Self {
        Error::InvalidState(msg.into())
    }

    pub fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }

    pub fn validation(record: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Validation {
            record: record.into(),
            msg: msg.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
