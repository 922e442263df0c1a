use std::path::PathBuf;

use thiserror::Error;

use crate::train::Checkpoint;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// An operation was called with arguments outside its contract
    /// (shape mismatch, out-of-range label, odd pooling input, ...).
    #[error("contract violation in {op}: {msg}")]
    Contract { op: &'static str, msg: String },

    #[error("configuration error: {0}")]
    Config(String),

    /// Malformed volume, header or report file. `field` names the offending entry.
    #[error("format error in {field}: {msg}")]
    Format { field: String, msg: String },

    #[error("checkpoint load error: {0}")]
    Checkpoint(String),

    #[error("training error: {0}")]
    Training(String),

    #[error("training diverged at iteration {iter} (loss {loss})")]
    Diverged {
        iter: usize,
        loss: f64,
        last_good: Box<Checkpoint>,
    },

    #[error("phantom generation failed: {0}")]
    Generation(String),

    #[error("metric error: {0}")]
    Metric(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn contract(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Contract { op, msg: msg.into() }
    }

    pub(crate) fn format(field: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Format {
            field: field.into(),
            msg: msg.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
