use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("manifest missing: {0}")]
    ManifestMissing(PathBuf),

    #[error("format error in {path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("corrupt shard {path} at byte offset {offset}: {message}")]
    Corruption {
        path: PathBuf,
        offset: u64,
        message: String,
    },

    #[error("invalid sample {sample_id:?}: {message}")]
    Validation { sample_id: String, message: String },

    #[error("hidden dimension mismatch for sample {sample_id:?}: expected {expected}, found {found}")]
    DimensionMismatch {
        sample_id: String,
        expected: usize,
        found: usize,
    },

    #[error("duplicate sample id {0:?}")]
    DuplicateId(String),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("no instruction tokens to condition on")]
    NoInstructionTokens,

    #[error("attention mass is zero for every visual token")]
    DegenerateAttention,

    #[error("singular spectrum is empty or identically zero")]
    DegenerateSpectrum,

    #[error("need at least 2 samples, got {0}")]
    TooFewSamples(usize),

    #[error("matrix of {rows}x{cols} exceeds the dense SVD guard of {limit} entries; use the randomized path")]
    TooLarge {
        rows: usize,
        cols: usize,
        limit: usize,
    },

    #[error("columns are not orthonormal: max |U^T U - I| = {0:e}")]
    NotOrthonormal(f64),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("json error at {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(message: impl Into<String>) -> Self {
        Error::Config(message.into())
    }

    /// True for errors caused by bad caller-supplied parameters rather than bad data.
    pub fn is_usage(&self) -> bool {
        matches!(self, Error::Config(_))
    }
}
