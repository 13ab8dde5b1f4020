use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("corrupt header: {0}")]
    CorruptHeader(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("non-finite value at valid cell (t={t}, row={row}, col={col})")]
    NonFinite { t: usize, row: usize, col: usize },

    #[error("no valid cells")]
    NoValidCells,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("config error in `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("tile {0} is inactive (no valid cells in its central region)")]
    InactiveTile(usize),

    #[error("singular system: {0}")]
    Singular(String),

    #[error("not trained: {0}")]
    Untrained(String),

    #[error("non-finite numerical result: {0}")]
    Numerical(String),

    #[error("near-defective matrix: relative reconstruction residual {0:.3e}")]
    NearDefective(f64),

    #[error("unsupported version {found} (this build reads version {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },

    #[error("checksum mismatch: {0}")]
    Checksum(String),

    #[error("degenerate data: {0}")]
    Degenerate(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }
}
