//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("layer {layer}: dimension mismatch, got {got}, expected {expected}")]
    DimensionMismatch {
        layer: usize,
        got: usize,
        expected: usize,
    },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("non-finite loss at example {example}")]
    NonFiniteLoss { example: usize },

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("timestep {t} out of range [{lo}, {hi}]")]
    TimestepOutOfRange { t: u32, lo: u32, hi: u32 },

    #[error("zero-norm feature cannot be used with cosine similarity")]
    ZeroNormFeature,

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("knowledge base is empty")]
    EmptyKnowledgeBase,

    #[error("knowledge base has no labels")]
    UnlabeledKnowledgeBase,

    #[error("privacy ledger is empty")]
    EmptyLedger,

    #[error("privacy budget exhausted: spent {spent:.6}, budget {budget:.6}")]
    PrivacyBudgetExceeded { spent: f64, budget: f64 },

    #[error("unclipped gradient: norm {norm:.6} exceeds bound {bound:.6}")]
    UnclippedGradient { norm: f64, bound: f64 },

    #[error("bad file format for {path}: {reason}")]
    BadFormat { path: String, reason: String },

    #[error("checksum mismatch for {artifact}: expected {expected}, got {actual}")]
    ChecksumMismatch {
        artifact: String,
        expected: String,
        actual: String,
    },

    #[error("missing artifact `{artifact}`: run the `{stage}` stage first")]
    MissingArtifact { artifact: String, stage: String },

    #[error("sigma calibration failed: {0}")]
    CalibrationFailed(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("config parse: {0}")]
    Toml(#[from] toml::de::Error),
}

impl Error {
    /// Re-tag a per-example error with the index it occurred at inside a batch.
    pub(crate) fn with_example(self, example: usize) -> Self {
        match self {
            Error::NonFiniteLoss { .. } => Error::NonFiniteLoss { example },
            other => other,
        }
    }
}
