use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch in {dim}: expected {expected}, got {actual}")]
    ShapeMismatch {
        op: &'static str,
        dim: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },

    #[error("{op}: expected dtype {expected}, got {actual}")]
    DTypeMismatch {
        op: &'static str,
        expected: &'static str,
        actual: &'static str,
    },

    #[error("unsupported bit-width {0} (expected 4 or 8)")]
    UnsupportedBitwidth(u32),

    #[error(
        "integer accumulator may overflow i32: {terms} products per output of magnitude up to {max_product}"
    )]
    AccumulatorOverflow { terms: usize, max_product: i64 },

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported container version {found} (this build reads version {expected})")]
    VersionMismatch { expected: u32, found: u32 },

    #[error("truncated {what}: needed {needed} bytes but only {available} remain")]
    Truncated {
        what: &'static str,
        needed: usize,
        available: usize,
    },

    #[error("malformed manifest at line {line}: {msg}")]
    Manifest { line: usize, msg: String },

    #[error("config error at line {line}: {msg}")]
    Config { line: usize, msg: String },

    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        Error::InvalidArgument {
            op,
            msg: msg.into(),
        }
    }

    pub(crate) fn file(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::File {
            path: path.into(),
            source,
        }
    }
}
