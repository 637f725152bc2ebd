use thiserror::Error;

#[derive(Debug, Error)]
pub enum CtdsError {
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("non-finite value produced in layer {layer}")]
    NonFinite { layer: usize },

    #[error("tape already consumed by a previous backward pass")]
    TapeConsumed,

    #[error("continuum evaluation requires a temperature coordinate")]
    MissingTemperature,

    #[error("operation requires a {0} path")]
    WrongPathKind(&'static str),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("degenerate importance weights (ESS = {ess})")]
    DegenerateWeights { ess: f64 },

    #[error("quadrature grid too coarse: {0}")]
    Quadrature(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("artifact mismatch: {0}")]
    Mismatch(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CtdsError {
    /// Process exit code: 1 for validation problems, 2 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            CtdsError::NonFinite { .. }
            | CtdsError::DegenerateWeights { .. }
            | CtdsError::Numerical(_)
            | CtdsError::Quadrature(_) => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, CtdsError>;
