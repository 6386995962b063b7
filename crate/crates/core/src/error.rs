use thiserror::Error;

/// Errors produced by mesh construction, solvers and the experiment harness.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("degenerate problem: {0}")]
    Degenerate(String),

    #[error("solver did not converge after {iterations} iterations (relative residual {residual:.3e})")]
    SolverFailure { iterations: usize, residual: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
