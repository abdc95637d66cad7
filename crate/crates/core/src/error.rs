use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("label {0:?} not present in the schema class list")]
    UnknownLabel(String),

    #[error("column {0:?} missing from CSV header")]
    MissingColumn(String),

    #[error("no usable rows after filtering")]
    EmptyDataset,

    #[error("split fractions must be non-negative and sum to 1 (got {0:?})")]
    BadFractions([f64; 3]),

    #[error("requested {requested} rows but only {available} available")]
    InsufficientData { requested: usize, available: usize },

    #[error("class {0} has no rows in the dataset")]
    MissingClass(usize),

    #[error("class {0} has no support instances in the episode")]
    EmptyClassSupport(usize),

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("parameter vector has length {got}, expected {expected}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("metric weights invalid: {0}")]
    WeightViolation(String),

    #[error("query target at row {row}, class {class} is {value}, not 0 or 1")]
    NonBinaryLabel { row: usize, class: usize, value: f64 },

    #[error("loss became non-finite at epoch {epoch}, episode {episode}")]
    DivergedLoss { epoch: usize, episode: usize },

    #[error("gradient contains non-finite entries")]
    NonFiniteGradient,

    #[error("no query instances to evaluate")]
    NoQueries,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("checkpoint does not match requested architecture: {0}")]
    CheckpointMismatch(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Subsystem the error originates from. Used by the CLI to report which
    /// contract failed.
    pub fn module(&self) -> &'static str {
        use Error::*;
        match self {
            UnknownLabel(_) | MissingColumn(_) | EmptyDataset | BadFractions(_)
            | InsufficientData { .. } | Csv(_) => "dataio",
            MissingClass(_) => "episodic",
            ShapeMismatch { .. } | LengthMismatch { .. } => "embedder",
            WeightViolation(_) => "metric_spaces",
            EmptyClassSupport(_) => "prototypes",
            NonBinaryLabel { .. } => "objective",
            DivergedLoss { .. } | NonFiniteGradient => "trainer",
            NoQueries => "evaluator",
            InvalidConfig(_) | CheckpointMismatch(_) | Io(_) | Json(_) => "cli",
        }
    }
}
