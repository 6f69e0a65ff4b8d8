use thiserror::Error;

/// Errors raised anywhere in the forecasting and bootstrap pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("empty sample")]
    EmptySample,
    #[error("insufficient sample: {0}")]
    InsufficientSample(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("singular design: {0}")]
    SingularDesign(String),
    #[error("no base period: {0}")]
    NoBasePeriod(String),
    #[error("scenario config: {0}")]
    Scenario(String),
    #[error("data: {0}")]
    Data(String),
    #[error("missing column `{0}`")]
    MissingColumn(String),
    #[error("selection: {0}")]
    Selection(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("{failed} of {total} bootstrap iterations failed (limit {limit:.0}%)")]
    TooManyFailures { failed: usize, total: usize, limit: f64 },
    #[error("config: {0}")]
    Config(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
