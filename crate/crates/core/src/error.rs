//! Error type shared across the workbench.

/// Errors produced by any stage of the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor or image dimensions do not line up; the message carries the
    /// offending extents.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// A parameter value outside the documented domain.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Non-finite values or a diverging optimization.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// Bad configuration file or incoherent plan (CLI exit code 2).
    #[error("config error: {0}")]
    Config(String),

    /// A pipeline stage was invoked before the artifact it consumes exists
    /// (CLI exit code 3). The message names the command that builds it.
    #[error("missing prerequisite: {0}")]
    MissingPrerequisite(String),

    /// Corrupt or foreign container file; `detail` includes the byte offset
    /// where decoding failed when known.
    #[error("format error in {path}: {detail}")]
    Format { path: String, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("image codec: {0}")]
    Image(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code used by the CLI for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::MissingPrerequisite(_) => 3,
            _ => 1,
        }
    }
}
