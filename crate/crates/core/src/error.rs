use thiserror::Error;

/// Errors raised by the estimation toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("horizon T = {0} must exceed e so that log T > 1")]
    HorizonTooShort(f64),

    #[error("prescribed bandwidth {value} exceeds 1 at T = {horizon}; horizon too short for the asymptotic rule")]
    BandwidthAboveOne { value: f64, horizon: f64 },

    #[error("kernel of order {order} is numerically ill-conditioned (moment residual {residual:e})")]
    Conditioning { order: usize, residual: f64 },

    #[error("convolution mesh with {nodes} nodes misses tolerance {tolerance:e} (observed {observed:e})")]
    MeshTolerance {
        nodes: usize,
        tolerance: f64,
        observed: f64,
    },

    #[error("simulation produced a non-finite state at step {step}")]
    Explosion { step: usize },

    #[error("time step {dt} violates dt <= {factor} * min(h)^2 = {limit}")]
    StepTooCoarse { dt: f64, factor: f64, limit: f64 },

    #[error("evaluation grid is empty")]
    EmptyGrid,

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("potential is not normalizable: {0}")]
    NotNormalizable(String),

    #[error("model `{0}` has no closed-form oracle")]
    MissingOracle(String),

    #[error("candidate bandwidth grid is empty")]
    EmptyCandidateGrid,

    #[error("degenerate regressor: all abscissae are equal")]
    DegenerateRegressor,

    #[error("cell ({horizon}, rep {replication}) exceeded its wall-clock budget of {budget_secs} s")]
    Budget {
        horizon: f64,
        replication: usize,
        budget_secs: f64,
    },

    #[error("malformed trajectory file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Error {
    Error::InvalidParameter {
        name,
        reason: reason.into(),
    }
}
