use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty aggregation")]
    EmptyAggregation,

    #[error("non-finite value {value} at index {index}")]
    NonFinite { index: usize, value: f64 },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("no valid pixels")]
    NoValidPixels,

    #[error("empty batch")]
    EmptyBatch,

    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: u16, num_classes: usize },

    #[error("empty class: class {0} has no pixels in the dataset")]
    EmptyClass(usize),

    #[error("invalid probability map: {0}")]
    InvalidScores(String),

    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    #[error("divergence: {0}")]
    Divergence(String),

    #[error("invalid config: {field}: {reason}")]
    InvalidConfig { field: &'static str, reason: String },

    #[error("degenerate class {class}: {reason}")]
    DegenerateClass { class: usize, reason: String },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("no defined IoU values")]
    NoDefinedIou,

    #[error("{0}")]
    Metric(String),

    #[error("not an SSEG1 file")]
    BadMagic,

    #[error("unsupported SSEG1 version {0}")]
    UnsupportedVersion(u16),

    #[error("unexpected end of file")]
    UnexpectedEof,

    #[error("malformed file: {0}")]
    Malformed(String),

    #[error("{path}: {source}")]
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
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
