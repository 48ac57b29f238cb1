use thiserror::Error;

/// Errors produced by the lab.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParams(String),

    /// No sample fell under the Hamming-weight threshold; the dataset holds
    /// too few sparse inputs for a curriculum phase.
    #[error("sparse split is empty")]
    SparseSetEmpty,

    #[error("data exhausted: needed {needed} unused samples, {available} available")]
    DataExhausted { needed: usize, available: usize },

    #[error("degenerate labels: label mean {0} has magnitude 1")]
    DegenerateLabels(f64),

    #[error("batch size mismatch: expected {expected}, got {got}")]
    BatchSizeMismatch { expected: usize, got: usize },

    #[error("explicit construction requires an even degree, got k = {0}")]
    KOdd(usize),

    #[error("enumeration too large: {count} exceeds limit {limit}")]
    TooLarge { count: u128, limit: u128 },

    #[error("span system has no solution: residual {residual:e}")]
    NoSolution { residual: f64 },

    #[error("span coefficients exceed norm bound: {max_abs} > {bound}")]
    NormBound { max_abs: f64, bound: f64 },

    #[error("group {group} has {size} record(s); at least 2 are needed")]
    GroupTooSmall { group: String, size: usize },

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Short tag used in failed-cell records.
    pub fn tag(&self) -> &'static str {
        match self {
            Error::InvalidParams(_) => "InvalidParams",
            Error::SparseSetEmpty => "SparseSetEmpty",
            Error::DataExhausted { .. } => "DataExhausted",
            Error::DegenerateLabels(_) => "DegenerateLabels",
            Error::BatchSizeMismatch { .. } => "BatchSizeMismatch",
            Error::KOdd(_) => "KOdd",
            Error::TooLarge { .. } => "TooLarge",
            Error::NoSolution { .. } => "NoSolution",
            Error::NormBound { .. } => "NormBound",
            Error::GroupTooSmall { .. } => "GroupTooSmall",
            Error::Parse(_) => "Parse",
            Error::Io(_) => "Io",
            Error::Json(_) => "Json",
            Error::Csv(_) => "Csv",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
