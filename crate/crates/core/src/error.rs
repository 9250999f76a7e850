use std::path::PathBuf;

/// Errors produced anywhere in the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    /// Kernel-size law produced an empty channel window.
    #[error("invalid CMP config: C={channels}, r={compression}, s={stride} gives k={kernel} (need k >= 1)")]
    InvalidCmpConfig {
        channels: usize,
        compression: f64,
        stride: usize,
        kernel: i64,
    },

    #[error("no stride s > 1 yields a non-empty window for C={channels}, r={compression}")]
    NoValidStride { channels: usize, compression: f64 },

    #[error("build error at layer {index} ({kind}): {reason}")]
    Build {
        index: usize,
        kind: &'static str,
        reason: String,
    },

    /// A forward or backward failure inside a built model.
    #[error("layer {index} ({kind}): {source}")]
    Layer {
        index: usize,
        kind: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("format error in {}: {reason}", path.display())]
    Format { path: PathBuf, reason: String },

    #[error("non-finite gradient in {0}")]
    NonFiniteGradient(String),

    /// Training produced a non-finite loss or gradient. Carries the best
    /// model seen before the failure, if any epoch completed.
    #[error("training diverged in epoch {epoch}: {reason}")]
    Diverged {
        epoch: usize,
        reason: String,
        checkpoint: Option<Box<crate::model::Model>>,
    },

    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
