use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the pruning toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A file did not match its declared on-disk format. `offset` is the byte
    /// position at which the problem was detected.
    #[error("{path}: byte {offset}: {reason}")]
    Format {
        path: PathBuf,
        offset: u64,
        reason: String,
    },

    #[error("config: {0}")]
    Config(String),

    /// Loaded data violates a content requirement (zero rows, NaN scores,
    /// mismatched lengths between companion arrays).
    #[error("data: {0}")]
    Data(String),

    /// An operation was called with arguments that violate its contract.
    #[error("{0}")]
    Invalid(String),

    #[error("infeasible allocation: sum(lb) = {sum_lb}, N = {n}, sum(ub) = {sum_ub}")]
    Infeasible { sum_lb: f64, n: f64, sum_ub: f64 },

    #[error("empty selection after stage '{stage}'")]
    EmptySelection { stage: String },
}

impl Error {
    /// Process exit code for this error class: 2 config, 3 data format,
    /// 4 infeasible allocation, 5 empty selection.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Invalid(_) => 2,
            Error::Io { .. } | Error::Format { .. } | Error::Data(_) => 3,
            Error::Infeasible { .. } => 4,
            Error::EmptySelection { .. } => 5,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn io_err(path: &std::path::Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub(crate) fn format_err(path: &std::path::Path, offset: u64, reason: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        offset,
        reason: reason.into(),
    }
}
