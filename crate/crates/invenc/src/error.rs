//! Crate-wide error type.

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate embedding: zero-norm vector")]
    DegenerateEmbedding,

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("embedding batch must hold at least one pair, got {rows} rows")]
    BatchTooSmall { rows: usize },

    #[error("invalid view pairing: {0}")]
    InvalidPairing(String),

    #[error("embedding row {row} is not unit length (norm {norm})")]
    NotNormalized { row: usize, norm: f64 },

    #[error("domain label {label} out of range for {num_domains} domains")]
    LabelOutOfRange { label: usize, num_domains: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("temperature must be positive, got {0}")]
    InvalidTemperature(f64),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("image {height}x{width} is smaller than the minimum input size {min}x{min}")]
    ImageTooSmall {
        height: usize,
        width: usize,
        min: usize,
    },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("cannot read image {path}: {reason}")]
    UnreadableImage { path: PathBuf, reason: String },

    #[error("non-finite {term} at epoch {epoch}, step {step}: training aborted")]
    NonFiniteLoss {
        term: &'static str,
        epoch: usize,
        step: usize,
    },

    #[error("config fingerprint mismatch: {0}")]
    FingerprintMismatch(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("evaluation error: {0}")]
    Eval(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
