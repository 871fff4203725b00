use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid coordinates: {0}")]
    Coordinates(String),

    #[error("duplicate {kind}: {detail}")]
    Duplicate { kind: &'static str, detail: String },

    #[error("index {index} out of range 1..={len}")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("invalid covariance parameters: {0}")]
    InvalidParams(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid neighbor budget: {0}")]
    NeighborBudget(String),

    #[error("point coincides with reference index {0}; use the reference index instead")]
    CoincidesWithReference(usize),

    #[error("matrix is not positive definite ({0})")]
    NotPositiveDefinite(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("{0}")]
    Singular(String),

    #[error("sampler produced a non-finite value: {0}")]
    NonFinite(String),

    #[error("too few posterior draws: need at least {needed}, have {have}")]
    TooFewDraws { needed: usize, have: usize },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short machine-readable name of the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Coordinates(_) => "coordinates",
            Error::Duplicate { .. } => "duplicate",
            Error::IndexOutOfRange { .. } => "index_out_of_range",
            Error::InvalidParams(_) => "invalid_params",
            Error::InvalidInput(_) => "invalid_input",
            Error::NeighborBudget(_) => "neighbor_budget",
            Error::CoincidesWithReference(_) => "coincides_with_reference",
            Error::NotPositiveDefinite(_) => "not_positive_definite",
            Error::Dimension { .. } => "dimension",
            Error::Singular(_) => "singular",
            Error::NonFinite(_) => "non_finite",
            Error::TooFewDraws { .. } => "too_few_draws",
            Error::Dataset(_) => "dataset",
            Error::Config(_) => "config",
            Error::Io(_) => "io",
            Error::Csv(_) => "csv",
            Error::Json(_) => "json",
        }
    }
}
