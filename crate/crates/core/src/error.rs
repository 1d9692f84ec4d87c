use thiserror::Error;

/// Errors raised anywhere in the characterization and analysis pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("ambiguous relation value at x = {x}: {detail}")]
    Ambiguous { x: f64, detail: String },
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("parse error at {location}: {message}")]
    Parse { location: String, message: String },
    #[error("program assembly error: {0}")]
    Assembly(String),
    #[error("solver error ({status}): {detail}")]
    Solver { status: String, detail: String },
    #[error("error bound validation failed: {0}")]
    Validation(String),
    #[error("internal inconsistency: {0}")]
    Inconsistent(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn parse(location: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Parse {
            location: location.into(),
            message: message.into(),
        }
    }
}
