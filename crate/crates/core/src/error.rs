use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("vector norm {norm:e} is too small to normalize")]
    ZeroNorm { norm: f64 },

    #[error("dimension mismatch: {0}")]
    DimMismatch(String),

    #[error("label {label} is not a valid class index (class count {classes})")]
    InvalidLabel { label: usize, classes: usize },

    #[error("margin matrix is {rows}x{cols}, expected {expected}x{expected}")]
    MarginShapeMismatch {
        rows: usize,
        cols: usize,
        expected: usize,
    },

    #[error("min-max normalization needs distinct off-diagonal distances")]
    DegenerateRange,

    #[error("unknown class id {0:?}")]
    UnknownClass(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("invariant violation: {0}")]
    InvariantViolation(String),

    #[error("non-finite value in {0}")]
    NonFiniteData(String),

    #[error("label {label} at position {index} is out of range for {classes} classes")]
    LabelOutOfRange {
        index: usize,
        label: u32,
        classes: u32,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("training diverged at iteration {iteration}: mean loss {loss}")]
    Divergence { iteration: u64, loss: f64 },

    #[error("gallery is empty")]
    EmptyGallery,
}

impl Error {
    /// Process exit status for the command-line tool: 4 for divergence, 3 for
    /// violated data invariants, 2 for everything else (malformed files,
    /// bad configuration, shape mismatches, i/o).
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Divergence { .. } => 4,
            Error::InvariantViolation(_) | Error::DegenerateRange | Error::ZeroNorm { .. } => 3,
            _ => 2,
        }
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
