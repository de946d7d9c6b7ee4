use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Shapes or dimensions that do not conform to an operation's contract.
    #[error("contract violation in {op}: {detail}")]
    Contract { op: &'static str, detail: String },

    /// A kernel or gradient produced NaN or infinity.
    #[error("numeric fault in {kernel}: non-finite value")]
    NumericFault { kernel: String },

    #[error("configuration error: {0}")]
    Config(String),

    /// Input for which the requested quantity is undefined (all-zero tensor, empty tap, ...).
    #[error("degenerate input in {op}: {detail}")]
    Degenerate { op: &'static str, detail: String },

    #[error("ingestion error for {path}: {detail}")]
    Ingestion { path: PathBuf, detail: String },

    #[error("training fault: {0}")]
    Training(String),

    /// Cholesky factorization failed; the caller should retry with a larger damping factor.
    #[error("cholesky factorization failed at pivot {pivot}")]
    NotPositiveDefinite { pivot: usize },

    #[error("basin estimate refused: {0}")]
    BasinRefused(String),

    #[error("checkpoint corruption in {path}: {detail}")]
    Corruption { path: PathBuf, detail: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn contract(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Contract {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn degenerate(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Degenerate {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn numeric(kernel: impl Into<String>) -> Self {
        Error::NumericFault { kernel: kernel.into() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
