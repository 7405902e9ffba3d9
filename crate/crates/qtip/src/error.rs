use std::path::PathBuf;

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid corridor: {0}")]
    InvalidCorridor(String),

    #[error("invalid OD matrix: {0}")]
    InvalidOd(String),

    #[error("invalid incident scenario: {0}")]
    InvalidScenario(String),

    #[error("distress signal reports {0} blocks, expected 1 or 2")]
    InvalidBlockCount(usize),

    #[error("OD rate {rate:.1} veh/h exceeds the saturation ceiling {ceiling:.1} veh/h")]
    CapacityViolation { rate: f64, ceiling: f64 },

    #[error("invalid simulation config: {0}")]
    InvalidSimConfig(String),

    #[error("batch job {index} failed: {source}")]
    BatchJob {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("speed series covers {got} minutes, need at least {need}")]
    SeriesTooShort { got: usize, need: usize },

    #[error("dataset shape mismatch: {0}")]
    DatasetMismatch(String),

    #[error("dataset has {n} rows but {k} columns; need n >= k")]
    TooFewRows { n: usize, k: usize },

    #[error("design matrix is rank-deficient; collinear columns: {}", .0.join(", "))]
    CollinearColumns(Vec<String>),

    #[error("hyperparameter {name} must be positive, got {value}")]
    NonPositiveHyper { name: &'static str, value: f64 },

    #[error("invalid hyperparameter: {0}")]
    InvalidHyper(String),

    #[error("all (tau, noise) grid points produced a singular kernel matrix")]
    SingularKernel,

    #[error("MLP training needs at least 10 rows, got {0}")]
    TooFewRowsForMlp(usize),

    #[error("feature vector has {got} entries, model expects {expected}")]
    DimensionMismatch { got: usize, expected: usize },

    #[error("piecewise incident model needs T_accident to route, none given")]
    MissingTAccident,

    #[error("empty residual set")]
    EmptyResiduals,

    #[error("observed value {0} must be positive for RMSNE")]
    NonPositiveObservation(f64),

    #[error("pair sum {0} must be positive for GEH")]
    NonPositivePairSum(f64),

    #[error("ordinary-model RMSE must be positive to compute relative improvement")]
    ZeroOrdinaryRmse,

    #[error("what-if budget {budget} is smaller than the {templates} consistent scenario templates; increase --budget to at least {templates}")]
    BudgetTooSmall { budget: usize, templates: usize },

    #[error("invalid experiment plan: {0}")]
    InvalidPlan(String),

    #[error("Bayesian adaptation needs a linear ordinary model with 6 coefficients, got {0}")]
    UnsupportedPrior(String),

    #[error("invalid clock time {0:?}, expected HH:MM")]
    InvalidClock(String),

    #[error("missing prerequisite: {0}")]
    MissingPrerequisite(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json { path: path.into(), source }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
