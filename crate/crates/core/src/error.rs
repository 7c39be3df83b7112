//! Error types shared across the crate.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),

    #[error("missing column `{0}` in header")]
    MissingColumn(String),

    #[error("non-numeric cell at row {row}, column `{column}`: {value:?}")]
    NonNumericCell {
        row: usize,
        column: String,
        value: String,
    },

    #[error("status outside {{0,1}} at row {0}")]
    InvalidStatus(usize),

    #[error("non-positive raw time at row {0}")]
    NonPositiveTime(usize),

    #[error("non-finite value at row {row}, column `{column}`")]
    NonFiniteValue { row: usize, column: String },

    #[error("zero events: at least one subject must have status 1")]
    ZeroEvents,

    #[error("empty sample")]
    EmptySample,

    #[error("sample too small: n = {n} but both stages require at least {required} subjects")]
    TooFewSubjects { n: usize, required: usize },

    #[error("invalid step distribution: {0}")]
    InvalidStepDistribution(String),

    #[error("censoring hazard ratio diverges on ({start}, {upper}): 1 - G is below the clamp threshold")]
    HazardDiverges { start: f64, upper: f64 },

    #[error("variance of the outcome must be positive, got {0}")]
    NonPositiveVariance(f64),

    #[error("residual distribution has no jumps")]
    EmptyResidualDistribution,

    #[error("rank-deficient design matrix: deficient columns {0:?}")]
    RankDeficient(Vec<usize>),

    #[error("singular A-hat matrix (condition estimate {0:.3e})")]
    SingularAHat(f64),

    #[error("negative covariance diagonal at index {index}: {value}")]
    NegativeVariance { index: usize, value: f64 },

    #[error("sample contains censored subjects; this estimator requires all events observed")]
    CensoredSubjectsPresent,

    #[error("invalid error scenario: {0}")]
    InvalidScenario(String),

    #[error("invalid simulation config: {0}")]
    InvalidSimConfig(String),

    #[error("censoring calibration failed: target rate {target} not bracketed by the population")]
    CalibrationBracket { target: f64 },

    #[error("empty report list")]
    EmptyReports,

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}
