use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors produced anywhere in the pipeline.
///
/// The variants are coarse on purpose: the command-line front end maps
/// them onto exit codes, so each one corresponds to a class of failure
/// rather than to a call site.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("conflict: {0}")]
    Conflict(String),

    #[error("bad data: {0}")]
    Data(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("corrupt file: {0}")]
    Corruption(String),

    #[error("lookup failed: {0}")]
    Lookup(String),

    #[error("inconsistent inputs: {0}")]
    Consistency(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("training diverged at step {step}: {reason}")]
    Training { step: usize, reason: String },

    #[error("no data: {0}")]
    NoData(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Prefix the message with extra context, keeping the variant.
    pub fn context(self, ctx: impl std::fmt::Display) -> Self {
        use Error::*;
        match self {
            InvalidArgument(m) => InvalidArgument(format!("{ctx}: {m}")),
            Shape(m) => Shape(format!("{ctx}: {m}")),
            Conflict(m) => Conflict(format!("{ctx}: {m}")),
            Data(m) => Data(format!("{ctx}: {m}")),
            Format(m) => Format(format!("{ctx}: {m}")),
            Corruption(m) => Corruption(format!("{ctx}: {m}")),
            Lookup(m) => Lookup(format!("{ctx}: {m}")),
            Consistency(m) => Consistency(format!("{ctx}: {m}")),
            Config(m) => Config(format!("{ctx}: {m}")),
            Training { step, reason } => Training {
                step,
                reason: format!("{ctx}: {reason}"),
            },
            NoData(m) => NoData(format!("{ctx}: {m}")),
            io @ Io { .. } => io,
        }
    }
}
