//! Crate-wide error type.

use std::path::PathBuf;

/// Errors surfaced by the library and the CLI.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor operands with incompatible shapes.
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    /// A public operation produced or received a non-finite value.
    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    /// An optimizer saw a non-finite loss or gradient.
    #[error("optimization diverged at step {step}: {context}")]
    Diverged { step: usize, context: String },

    /// Invalid experiment configuration.
    #[error("invalid config: {0}")]
    Config(String),

    /// A task id was registered twice or assigned to two owners.
    #[error("duplicate task `{0}`")]
    DuplicateTask(String),

    /// A task id the server has never seen.
    #[error("unknown task `{0}`")]
    UnknownTask(String),

    /// Malformed checkpoint container.
    #[error("checkpoint: {0}")]
    Checkpoint(String),

    /// Malformed metrics or report artifact.
    #[error("artifact {path}: {detail}")]
    Artifact { path: PathBuf, detail: String },

    /// Filesystem failure with the path that caused it.
    #[error("i/o on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Stable machine-readable tag for the CLI's error records.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::ShapeMismatch { .. } => "shape_mismatch",
            Error::NonFinite { .. } => "non_finite",
            Error::Diverged { .. } => "diverged",
            Error::Config(_) => "config",
            Error::DuplicateTask(_) => "duplicate_task",
            Error::UnknownTask(_) => "unknown_task",
            Error::Checkpoint(_) => "checkpoint",
            Error::Artifact { .. } => "artifact",
            Error::Io { .. } => "io",
        }
    }

    /// Convenience constructor for shape errors.
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }

    /// Convenience constructor for i/o errors tagged with their path.
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
