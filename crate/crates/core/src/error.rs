use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the tracking engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),

    #[error("degenerate box: width {w}, height {h}")]
    DegenerateBox { w: f64, h: f64 },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("index {index} out of range for {len} centroids")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("numeric overflow in {0}")]
    NumericOverflow(&'static str),

    #[error("training diverged at iteration {iteration}")]
    TrainingDiverged { iteration: usize },

    #[error("sequencing error: expected frame {expected}, got {got}")]
    Sequencing { expected: u32, got: u32 },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("schema error in {path}: {message}")]
    Schema { path: PathBuf, message: String },

    #[error("invalid input: {0}")]
    Input(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("codebook mismatch: weights expect checksum {expected:016x}, codebook has {actual:016x}")]
    CodebookMismatch { expected: u64, actual: u64 },

    #[error("bad file format: {0}")]
    Format(String),

    #[error("io error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
