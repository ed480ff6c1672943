use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("field is not in U: u(0) has max magnitude {0:e}")]
    NotInU(f64),
    #[error("final-time condition is singular: alpha1 = 0")]
    SingularFinalCondition,
    #[error("channel count mismatch: expected {expected}, got {got}")]
    ChannelMismatch { expected: usize, got: usize },
    #[error("iteration diverged at step {iteration}: residual {residual:e} exceeds 10x initial {initial:e}")]
    Divergence {
        iteration: usize,
        residual: f64,
        initial: f64,
    },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
