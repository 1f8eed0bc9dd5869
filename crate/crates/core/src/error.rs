use std::path::PathBuf;

/// Errors raised anywhere in the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("malformed {format} stream at byte {offset}: {msg}")]
    Format {
        format: &'static str,
        offset: usize,
        msg: String,
    },

    #[error("shape mismatch in {op}: {msg}")]
    Shape { op: &'static str, msg: String },

    #[error("non-finite value produced by node {node} ({op})")]
    NonFinite { node: usize, op: &'static str },

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("schema mismatch: {0}")]
    Schema(String),

    #[error("training diverged at epoch {epoch}; last good checkpoint: {}", checkpoint.display())]
    Diverged { epoch: usize, checkpoint: PathBuf },

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn format(format: &'static str, offset: usize, msg: impl Into<String>) -> Self {
        Error::Format {
            format,
            offset,
            msg: msg.into(),
        }
    }

    pub(crate) fn shape(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Shape {
            op,
            msg: msg.into(),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
