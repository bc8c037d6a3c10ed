use thiserror::Error;

pub type Result<T> = std::result::Result<T, AmtError>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AmtError {
    #[error("cell count is zero and continuity correction is disabled")]
    ZeroCell,
    #[error("invalid counts: {0}")]
    InvalidCounts(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("non-positive or non-finite variance {v} for trial `{id}`")]
    NonPositiveVariance { id: String, v: f64 },
    #[error("non-finite value in column `{column}` for trial `{id}`")]
    NonFiniteValue { id: String, column: String },
    #[error("missing intercept: first moderator must be `z.intercept` equal to 1 ({0})")]
    MissingInterceptColumn(String),
    #[error("dataset contains no trials")]
    EmptyDataset,
    #[error("need at least {needed} trials, found {found}")]
    TooFewTrials { needed: usize, found: usize },
    #[error("singular design: {0}")]
    SingularDesign(String),
    #[error("regime `{0}` has no trials")]
    EmptyRegime(String),
    #[error("invalid hyperparameter: {0}")]
    InvalidHyperparameter(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("csv error: {0}")]
    Csv(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("io error: {0}")]
    Io(String),
}

impl AmtError {
    /// Stable machine-readable tag for the error variant.
    pub fn kind(&self) -> &'static str {
        match self {
            AmtError::ZeroCell => "ZeroCell",
            AmtError::InvalidCounts(_) => "InvalidCounts",
            AmtError::DimensionMismatch(_) => "DimensionMismatch",
            AmtError::NonPositiveVariance { .. } => "NonPositiveVariance",
            AmtError::NonFiniteValue { .. } => "NonFiniteValue",
            AmtError::MissingInterceptColumn(_) => "MissingInterceptColumn",
            AmtError::EmptyDataset => "EmptyDataset",
            AmtError::TooFewTrials { .. } => "TooFewTrials",
            AmtError::SingularDesign(_) => "SingularDesign",
            AmtError::EmptyRegime(_) => "EmptyRegime",
            AmtError::InvalidHyperparameter(_) => "InvalidHyperparameter",
            AmtError::InvalidArgument(_) => "InvalidArgument",
            AmtError::Csv(_) => "Csv",
            AmtError::Config(_) => "Config",
            AmtError::Io(_) => "Io",
        }
    }
}

impl From<csv::Error> for AmtError {
    fn from(e: csv::Error) -> Self {
        AmtError::Csv(e.to_string())
    }
}

impl From<std::io::Error> for AmtError {
    fn from(e: std::io::Error) -> Self {
        AmtError::Io(e.to_string())
    }
}
