use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, Error)]
pub enum Error {
    #[error("invalid configuration: {field}: {reason}")]
    Config { field: &'static str, reason: String },

    #[error("unsupported derivative order {order} (maximum is 4)")]
    UnsupportedOrder { order: usize },

    #[error("fields live on different grids")]
    GridMismatch,

    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("linear solve failed: {reason} (condition estimate {condition:.3e})")]
    Solver { reason: String, condition: f64 },

    #[error("map is not free: smallest singular value {margin:.3e} at node {node} (threshold {threshold:.3e})")]
    NotFree { node: usize, margin: f64, threshold: f64 },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("smallness condition violated at step {step}: {reason}")]
    SmallnessViolation { step: usize, reason: String },

    #[error("time horizon collapsed to {horizon:.3e} (minimum step {dt_min:.3e})")]
    HorizonCollapse { horizon: f64, dt_min: f64 },

    #[error("stage {stage} failed: {source}")]
    StageFailure { stage: usize, source: Box<Error> },
}

impl Error {
    pub(crate) fn config(field: &'static str, reason: impl Into<String>) -> Self {
        Error::Config { field, reason: reason.into() }
    }
}
