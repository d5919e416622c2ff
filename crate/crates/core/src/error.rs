use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("non-finite input: {0}")]
    NonFinite(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("empty stratum: no rows with feature {feature} equal to {value}")]
    EmptyStratum { feature: usize, value: f64 },

    #[error("all pairwise differences are zero; supply a bandwidth manually")]
    ZeroMedian,

    #[error("treatment column has a single class; positivity cannot hold")]
    SingleTreatmentClass,

    #[error("sampler kind {kind} does not match column {column} ({column_kind})")]
    SamplerMismatch {
        kind: String,
        column: String,
        column_kind: String,
    },

    #[error("{invalid} of {total} resampled statistics were invalid (limit 5%)")]
    TooManyInvalidReplicates { invalid: usize, total: usize },

    #[error("exact mode at n = {n} exceeds the {cap_bytes} byte Gram cap; use rff mode or raise the cap")]
    ExactModeTooLarge { n: usize, cap_bytes: usize },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}
