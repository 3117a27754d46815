use thiserror::Error;

/// Errors raised by model fitting, screening, simulation and ingestion.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("design is rank deficient (singular value ratio {ratio:.3e})")]
    RankDeficient { ratio: f64 },

    #[error("logistic fit did not converge (coefficient norm {norm:.3e}, likely separation)")]
    NotConverged { norm: f64 },

    #[error("biomarker {index} is constant")]
    DegenerateBiomarker { index: usize },

    #[error("both treatment arms must be present")]
    SingleTreatmentArm,

    #[error("biomarker index {index} out of range (m = {m})")]
    IndexOutOfRange { index: usize, m: usize },

    #[error("invalid data: {0}")]
    InvalidData(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("ranking is not a permutation of 0..{m}")]
    InvalidRanking { m: usize },

    #[error("scenario has no biomarker with an interaction effect")]
    NoInteractionCluster,

    #[error("at least 3 complete pairs are required, got {got}")]
    InsufficientPairs { got: usize },

    #[error("biomarker {index} carries an interaction effect in the scenario")]
    IndexHasInteraction { index: usize },

    #[error("treatment column has {found} distinct values, expected at most 2")]
    NonBinaryTreatment { found: usize },

    #[error("no usable data left after filtering: {0}")]
    EmptyAfterFiltering(String),

    #[error("non-numeric value {value:?} at row {row}, column {column:?}")]
    NonNumericCell {
        row: usize,
        column: String,
        value: String,
    },

    #[error("unknown scenario preset {0:?}")]
    PresetNotFound(String),

    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
