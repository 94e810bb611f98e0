use thiserror::Error;

/// Error type shared by every module in this crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Shape or extent mismatch in a tensor or mesh operation.
    #[error("{op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    /// An argument violated a documented precondition.
    #[error("invalid argument: {0}")]
    Argument(String),

    /// A computation produced NaN or infinity, or diverged.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// Geometric degeneracy (zero-area mesh, empty silhouette, ...).
    #[error("geometry error: {0}")]
    Geometry(String),

    /// API misuse: an operation was called in a state its contract forbids.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Malformed input data (OBJ, CSV, config, checkpoint).
    #[error("parse error (line {line}): {message}")]
    Parse { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Error {
        Error::Dimension { op, detail: detail.into() }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
