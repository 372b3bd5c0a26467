use thiserror::Error;

/// Errors produced by the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller-supplied argument violated a precondition.
    #[error("invalid argument: {0}")]
    Argument(String),
    /// A user-supplied oracle returned a non-finite value or otherwise failed.
    #[error("oracle failure: {0}")]
    Oracle(String),
    /// An expansion point sits on a non-smooth locus of the function; the
    /// caller should perturb it and retry.
    #[error("degenerate expansion point: {0}")]
    Degenerate(String),
    /// Not enough data to perform the requested analysis.
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn argument(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }

    pub fn oracle(msg: impl Into<String>) -> Self {
        Error::Oracle(msg.into())
    }
}
