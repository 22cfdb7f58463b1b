use thiserror::Error;

/// Errors raised across the laboratory.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("cell {cell}: image endpoint {endpoint} is {offset:e} away from any partition boundary")]
    NonMarkovPartition {
        cell: usize,
        endpoint: f64,
        offset: f64,
    },

    #[error("horizon too small: {0}")]
    HorizonTooSmall(String),

    #[error("iterate escaped into truncated mass")]
    EscapedTruncation,

    #[error("no Jacobian available for map '{0}'")]
    JacobianUnavailable(String),

    #[error("image of cell {0} is not a union of partition cells")]
    NonMarkovImage(usize),

    #[error("horizon {0} exceeded before the search concluded")]
    HorizonExceeded(usize),

    #[error("height cap {cap} is below the largest retained return time {return_time}")]
    HeightCapBelowReturnTime { cap: usize, return_time: usize },

    #[error("no convergence after {iterations} iterations (last L1 increment {increment:e})")]
    NoConvergence { iterations: usize, increment: f64 },

    #[error("densities live on different grids")]
    GridMismatch,

    #[error("no stopping schedule found: {0}")]
    NoScheduleFound(String),

    #[error("sample budget too small: {0}")]
    BudgetTooSmall(String),

    #[error("fit needs at least {needed} usable points in the window, got {got}")]
    TooFewPoints { needed: usize, got: usize },

    #[error("ill-conditioned fit: {0}")]
    IllConditioned(String),

    #[error("correlations are not summable (fitted exponent {0:.3} <= 1)")]
    NonSummable(f64),

    #[error("unknown {kind} '{name}'")]
    Unknown { kind: &'static str, name: String },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
