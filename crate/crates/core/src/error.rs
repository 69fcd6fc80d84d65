use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("precondition violated: {0}")]
    Precondition(String),

    /// A loss or target went NaN/Inf. `batch_index` is the first offending row.
    #[error("training diverged: non-finite {quantity} at batch index {batch_index}")]
    Divergence {
        quantity: &'static str,
        batch_index: usize,
    },

    #[error("non-finite gradient; update refused")]
    NonFiniteGradient,

    #[error("decomposition mode `{0}` has no global Q-value")]
    UnsupportedMode(&'static str),

    #[error("invalid action in dimension {dim}: index {index} outside 0..{size}")]
    InvalidAction { dim: usize, index: usize, size: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("bad magic bytes in {0}")]
    BadMagic(&'static str),

    #[error("unsupported {format} version {version}")]
    UnsupportedVersion { format: &'static str, version: u32 },

    #[error("truncated {0} file")]
    Truncated(&'static str),

    #[error("invalid {format} contents: {reason}")]
    InvalidFile {
        format: &'static str,
        reason: String,
    },

    #[error("source `{source_name}` has {available} transitions, {required} required")]
    InsufficientSource {
        source_name: String,
        available: usize,
        required: usize,
    },

    #[error("missing {what}: {path}")]
    Missing { what: &'static str, path: PathBuf },

    /// Failure inside a named pipeline stage.
    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn precondition(msg: impl Into<String>) -> Self {
        Error::Precondition(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// Process exit code used by the command-line tool.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Precondition(_) => 2,
            Error::Divergence { .. } | Error::NonFiniteGradient => 3,
            Error::Io(_)
            | Error::BadMagic(_)
            | Error::UnsupportedVersion { .. }
            | Error::Truncated(_)
            | Error::InvalidFile { .. }
            | Error::Missing { .. } => 4,
            Error::Stage { source, .. } => source.exit_code(),
            _ => 1,
        }
    }

    /// Tags the error with the pipeline stage it came from.
    pub fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}
