use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("index {index} out of range (valid 1..={max})")]
    IndexOutOfRange { index: usize, max: usize },

    #[error("need at least {needed} samples, got {got}")]
    InsufficientSamples { needed: usize, got: usize },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("configuration-space metric is singular at shape {shape:?}")]
    SingularMetric { shape: Vec<f64> },

    #[error("joint {joint} left its limits at t = {t:.4} s (angle {angle:.4} rad)")]
    JointLimit { joint: usize, t: f64, angle: f64 },

    #[error("desired velocity is not reachable: {0}")]
    Infeasible(String),

    #[error("solver failed: {0}")]
    SolverFailure(String),

    #[error("pair is not stabilizable: {0}")]
    NotStabilizable(String),

    #[error("gait curve intersects itself")]
    SelfIntersecting,

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
