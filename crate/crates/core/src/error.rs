use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the analysis pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("bad magic in {path}: expected \"EFT1\", found {found:?}")]
    BadMagic { path: PathBuf, found: [u8; 4] },

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),

    #[error("unknown dtype code {0}")]
    UnknownDtype(u8),

    #[error("truncated payload in {path}: expected {expected} bytes, found {found}")]
    Truncated { path: PathBuf, expected: u64, found: u64 },

    #[error("header mismatch for {path}: {detail}")]
    HeaderMismatch { path: PathBuf, detail: String },

    #[error("manifest schema violation: {0}")]
    Schema(String),

    #[error("missing dump(s): {}", .0.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(", "))]
    MissingDumps(Vec<PathBuf>),

    #[error("non-finite {what} at ({row}, {col})")]
    NonFinite { what: &'static str, row: usize, col: usize },

    #[error("invalid shape: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty flattened signal (L = 1 has no row beyond row 0)")]
    EmptySignal,

    #[error("row spread too large for CLR check (row {row}: softmax underflowed to zero)")]
    ClrUnderflow { row: usize },

    #[error("SVD did not converge for {0}")]
    SvdNonConvergence(String),

    #[error("zero key matrix")]
    ZeroKeyMatrix,

    #[error("input vector is not unit-norm (norm = {0})")]
    NotUnitNorm(f64),

    #[error("undefined fidelity: zero matrix")]
    UndefinedFidelity,

    #[error("channel index {index} out of range 1..={rank}")]
    ChannelOutOfRange { index: usize, rank: usize },

    #[error("insufficient length for {levels} levels (padded length {padded})")]
    InsufficientLength { levels: usize, padded: usize },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors originating from files, formats, or schemas rather than
    /// from the numerical pipeline.
    pub fn is_io_or_schema(&self) -> bool {
        matches!(
            self,
            Error::Io { .. }
                | Error::BadMagic { .. }
                | Error::UnsupportedVersion(_)
                | Error::UnknownDtype(_)
                | Error::Truncated { .. }
                | Error::HeaderMismatch { .. }
                | Error::Schema(_)
                | Error::MissingDumps(_)
                | Error::Json(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
