use thiserror::Error;

/// Error type shared by every pipeline stage.
#[derive(Debug, Error)]
pub enum Error {
    /// An operation received input that violates its preconditions.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A configuration value is outside its allowed range or inconsistent.
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// A line-oriented file failed to parse; `line` is 1-based.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    /// Training produced a non-finite loss or gradient.
    #[error("training diverged: {0}")]
    Divergence(String),

    /// A checkpoint's tensor table does not match the policy architecture.
    #[error("checkpoint shape mismatch: {0}")]
    ShapeMismatch(String),

    /// A training mode was invoked without the checkpoint it builds on.
    #[error("missing prerequisite checkpoint: {0}")]
    MissingPrerequisite(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
