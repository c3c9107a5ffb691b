use thiserror::Error;

/// Errors surfaced by the estimation library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("covariate out of range at row {row}, column {col}: {value} is outside [0, 1]")]
    CovariateOutOfRange { row: usize, col: usize, value: f64 },
    #[error("outcome span {span} exceeds the declared range {range}")]
    OutcomeRangeExceeded { span: f64, range: f64 },
    #[error("degenerate treatment groups: treated={n_treated}, control={n_control}")]
    DegenerateGroups { n_treated: usize, n_control: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("privacy budget must be positive, got {0}")]
    NonPositiveBudget(f64),
    #[error("sensitivity must be positive, got {0}")]
    NonPositiveSensitivity(f64),
    #[error("budget exceeded: recording {requested} on top of {spent} breaks the total {total}")]
    BudgetExceeded { requested: f64, spent: f64, total: f64 },
    #[error("ledger violation: {0}")]
    LedgerViolation(String),
    #[error("invalid budget split ratios ({0}, {1}, {2}): each must be positive and sum to 1")]
    InvalidRatios(f64, f64, f64),
    #[error("uncapped matching requires noise-disabled oracle mode")]
    UncappedWithoutOracle,
    #[error("parse error at row {row}, column {col}: {message}")]
    ParseError { row: usize, col: String, message: String },
    #[error("schema error: {0}")]
    SchemaError(String),
    #[error("relative error is undefined for a zero true effect")]
    ZeroTrueEffect,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
