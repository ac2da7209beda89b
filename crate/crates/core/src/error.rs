use thiserror::Error;

/// Errors raised anywhere in the segmentation engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid shape: {0}")]
    InvalidShape(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("input too small: {height}x{width} image, need at least {min} pixels per side")]
    InputTooSmall { height: usize, width: usize, min: usize },
    #[error("degenerate transform: {0}")]
    DegenerateTransform(String),
    #[error("non-finite gradient for parameter `{param}` at iteration {iteration}")]
    NonFiniteGradient { param: String, iteration: usize },
    #[error("evaluation error: {0}")]
    Evaluation(String),
    #[error("unsupported or corrupt image `{path}`: {reason}")]
    Image { path: String, reason: String },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
