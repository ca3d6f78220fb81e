use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the routing laboratory.
#[derive(Debug, Error)]
pub enum Error {
    /// An operation argument is outside its admissible range (e.g. `k > n`).
    #[error("parameter error: {0}")]
    Parameter(String),

    /// Input data violates a data invariant (e.g. score/load length mismatch).
    #[error("input error: {0}")]
    Input(String),

    /// Experiment configuration is inconsistent (band coverage, placement, weights).
    #[error("configuration error: {0}")]
    Config(String),

    /// A trace file is malformed. `offset` is the byte offset of the problem.
    #[error("trace format error at byte offset {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::Parameter(msg.into())
    }

    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn format(offset: u64, msg: impl Into<String>) -> Self {
        Error::Format {
            offset,
            message: msg.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by user-supplied configuration rather than runtime failures.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_) | Error::Parameter(_))
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
