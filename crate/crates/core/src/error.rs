use std::path::PathBuf;

use thiserror::Error;

#[derive(Error, Debug)]
pub enum Error {
    #[error("tensor error: {0}")]
    Tensor(#[from] candle_core::Error),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape error: expected {expected}, got {actual}")]
    Shape { expected: String, actual: String },

    #[error("height {value} um outside [{min}, {max}] um{}", at.map(|(r, c)| format!(" at pixel (row {r}, col {c})")).unwrap_or_default())]
    HeightOutOfRange {
        value: f64,
        min: f64,
        max: f64,
        at: Option<(usize, usize)>,
    },

    #[error("image is already in the normalized [0,1] domain")]
    AlreadyNormalized,

    #[error("image must be in the raw [0,255] domain for {0}")]
    NotRaw(&'static str),

    #[error("sample {0} has already been augmented")]
    AlreadyAugmented(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("checkpoint mismatch: {}", .mismatched.join(", "))]
    CheckpointMismatch { mismatched: Vec<String> },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("training diverged: non-finite {term} loss")]
    Divergence {
        term: String,
        recent: Vec<crate::losses::LossBreakdown>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        source: image::ImageError,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(expected: impl ToString, actual: impl ToString) -> Self {
        Error::Shape {
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
