use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid plant parameters: {0}")]
    InvalidPlant(String),
    #[error("input delay {delay} s is not an integer multiple of the sample time {sample_time} s")]
    DelayNotMultiple { delay: f64, sample_time: f64 },
    #[error("invalid context distribution: {0}")]
    InvalidDistribution(String),
    #[error("invalid controller parameters: {0}")]
    InvalidParams(String),
    #[error("normal equations of the MPC problem are numerically singular")]
    SingularSolve,
    #[error("Kalman filter innovation covariance is singular")]
    SingularInnovation,
    #[error("kernel matrix is not positive definite even after jitter")]
    NotPositiveDefinite,
    #[error("need at least {needed} observations, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid configuration at `{path}`: {message}")]
    Config { path: String, message: String },
}

impl Error {
    pub fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            message: message.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
