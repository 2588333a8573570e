use alloc::string::String;

/// Errors raised by the numerical core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("simulation diverged: non-finite state in trajectory {trajectory} at step {step}")]
    SimulationDiverged { trajectory: usize, step: usize },

    #[error("all importance weights in the batch are saturated or zero")]
    DegenerateWeights,

    #[error("model parameters are not finite")]
    CorruptModel,

    #[error("tape would hold {requested} values, above the ceiling of {limit}; reduce the batch size or the number of time steps")]
    ResourceExhausted { requested: usize, limit: usize },

    #[error("Riccati solution blew up (|F| > 1e8) at t = {time}; the horizon is too long for these coefficients")]
    HorizonTooLong { time: f64 },

    #[error("grid solution lost positivity at node {node}, time index {step}; refine the grid")]
    Resolution { node: usize, step: usize },

    #[error("spline covariance factor is singular or ill-conditioned at t = {time}")]
    IllConditionedSpline { time: f64 },

    #[error("warm-start training diverged (objective {objective:e})")]
    WarmStartFailed { objective: f64 },

    #[error("no ground truth is available for setting `{0}`")]
    UnsupportedSetting(String),

    #[error("Monte Carlo oracle produced only zero weights")]
    DegenerateOracle,

    #[error("importance weights have zero mean")]
    ZeroMeanWeights,
}

pub type Result<T, E = Error> = core::result::Result<T, E>;

pub(crate) fn contract(msg: impl Into<String>) -> Error {
    Error::Contract(msg.into())
}
