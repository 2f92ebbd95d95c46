use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, ClaqError>;

#[derive(Debug, Error)]
pub enum ClaqError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("size mismatch for tensor {name}: expected {expected} bytes, found {found}")]
    SizeMismatch {
        name: String,
        expected: usize,
        found: usize,
    },

    #[error("duplicate name {0:?}")]
    DuplicateName(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("bad magic: not a CLAQ packed container")]
    BadMagic,

    #[error("unsupported version {0:?}")]
    UnsupportedVersion(String),

    #[error("truncated file: {0}")]
    Truncated(String),

    #[error("index {index} out of codebook range for column {col} ({bits}-bit) in tensor {name}")]
    IndexOutOfRange {
        name: String,
        col: usize,
        index: u8,
        bits: u8,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("oracle input of {len} values exceeds cap {cap}")]
    OracleCap { len: usize, cap: usize },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("infeasible budget: {0}")]
    Infeasible(String),
}

impl ClaqError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        ClaqError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI: 2 validation, 3 numerical abort, 4 infeasible budget.
    pub fn exit_code(&self) -> i32 {
        match self {
            ClaqError::Numerical(_) => 3,
            ClaqError::Infeasible(_) => 4,
            _ => 2,
        }
    }
}
