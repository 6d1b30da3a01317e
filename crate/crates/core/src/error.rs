use thiserror::Error;

/// Errors produced by the stereo lab.
#[derive(Debug, Error)]
pub enum Error {
    #[error("empty image")]
    EmptyImage,
    #[error("size mismatch: expected {expected:?}, got {got:?}")]
    SizeMismatch {
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("invalid disparity {0} (must be > 0)")]
    InvalidDisparity(f64),
    #[error("invalid depth {0} (must be > 0)")]
    InvalidDepth(f64),
    #[error("render error: {0}")]
    Render(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("average precision undefined: ground truth has no positive pixels")]
    NoPositives,
    #[error("malformed file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_same_size(expected: (usize, usize), got: (usize, usize)) -> Result<()> {
    if expected != got {
        return Err(Error::SizeMismatch { expected, got });
    }
    Ok(())
}
