//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by graph construction, image processing and the
/// neural-network core.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),

    #[error("image codec: {0}")]
    Image(#[from] image::ImageError),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    /// Every pixel fell below the optical-density background threshold.
    #[error("no tissue content: every pixel is background at threshold {threshold}")]
    AllBackground { threshold: f64 },

    /// The optical-density cloud does not span a two-stain plane.
    #[error("degenerate stain estimate: {0}")]
    DegenerateStains(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// A gradient or parameter became NaN/inf; carries the parameter name.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("{0}")]
    InvalidInput(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }
}
