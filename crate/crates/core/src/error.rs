use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    /// Input data violates a declared vocabulary or schema.
    #[error("validation error: {0}")]
    Validation(String),

    /// Invalid configuration values.
    #[error("config error: {0}")]
    Config(String),

    /// Malformed model input (empty sequence, out-of-range token...).
    #[error("input error: {0}")]
    Input(String),

    /// Caller broke an API contract (shape mismatch, unknown method...).
    #[error("contract error: {0}")]
    Contract(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    /// Training produced a non-finite loss or gradient.
    #[error("non-finite loss at step {step} (batch {batch:?})")]
    NonFinite { step: usize, batch: Vec<String> },

    /// Checkpoint could not be loaded; `field` names the offending entry.
    #[error("checkpoint error in `{field}`: {message}")]
    Load { field: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn load(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Load {
            field: field.into(),
            message: message.into(),
        }
    }

    /// True for errors caused by bad inputs or configuration as opposed to
    /// runtime or numeric failures.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Parse { .. }
                | Error::Validation(_)
                | Error::Config(_)
                | Error::Input(_)
                | Error::Contract(_)
                | Error::Load { .. }
        )
    }
}
