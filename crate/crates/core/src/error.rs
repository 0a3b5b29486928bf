use thiserror::Error;

/// Errors raised by the solvers and drivers in this crate.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("{solver} did not converge (last residual norm {residual:e})")]
    SolverFailure { solver: &'static str, residual: f64 },
    #[error("linear algebra failure: {0}")]
    LinearAlgebra(String),
    #[error("reduced basis is empty: every candidate column was degenerate")]
    EmptyBasis,
    #[error("configuration error: {0}")]
    Config(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}
