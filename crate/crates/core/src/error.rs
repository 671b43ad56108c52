use std::io;
use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),

    #[error("invalid value: {0}")]
    InvalidValue(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("class proportions sum to {0}, expected 1")]
    Proportions(f64),

    #[error("architecture audit failed: {0}")]
    Audit(String),

    #[error("non-finite loss at step {step} (d_loss={d_loss}, g_loss={g_loss})")]
    NonFiniteLoss { step: usize, d_loss: f64, g_loss: f64 },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },

    #[error("malformed file: {0}")]
    Format(String),

    #[error("checkpoint CRC mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Crc { stored: u32, computed: u32 },

    #[error("unsupported checkpoint version {0}")]
    Version(u32),

    #[error("duplicate tensor name `{0}`")]
    DuplicateName(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Attaches a file path to format-level errors raised while decoding.
    pub(crate) fn at(self, path: &std::path::Path) -> Self {
        match self {
            Error::Format(reason) => Error::Format(format!("{}: {reason}", path.display())),
            other => other,
        }
    }
}
