use thiserror::Error;

/// Errors surfaced by the detection library.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes do not satisfy an operation's contract.
    #[error("shape error: {0}")]
    Shape(String),

    /// A non-finite value (NaN/Inf) or an out-of-domain numeric input.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Invalid configuration value or inconsistent hyperparameters.
    #[error("config error: {0}")]
    Config(String),

    /// Invalid caller-supplied data (degenerate boxes, bad targets, ...).
    #[error("input error: {0}")]
    Input(String),

    /// File format violations (.ten blobs, PPM images, COCO JSON).
    #[error("format error: {0}")]
    Format(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
