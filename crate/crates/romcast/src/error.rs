//! Error type shared across the crate, with a stable mapping to CLI exit codes.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// An operation received tensors whose shapes do not satisfy its rule.
    #[error("{op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// Invalid run configuration: unknown keys, unparsable values, or
    /// settings outside their documented domain.
    #[error("configuration error: {0}")]
    Config(String),

    /// Malformed or inconsistent data artifacts: bad magic bytes, truncated
    /// files, extent mismatches, empty splits, non-finite payloads.
    #[error("data error: {0}")]
    Data(String),

    /// Numerical failure: non-finite loss, degenerate grids, factorization
    /// breakdown.
    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    /// Process exit code used by the command-line driver.
    ///
    /// 2 = configuration error, 3 = data error, 4 = numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Shape { .. } | Error::Data(_) | Error::Io(_) => 3,
            Error::Numerical(_) => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
