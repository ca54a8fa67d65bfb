use thiserror::Error;

/// Errors raised across the crate.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("numeric failure in layer {layer}: {what}")]
    Numeric { layer: usize, what: String },
    #[error("second-order information unavailable for {0}")]
    SecondOrderUnavailable(String),
    #[error("matrix not positive definite: {0}")]
    NotPositiveDefinite(String),
    #[error("model unbounded below: still infeasible after {0} doublings of kappa")]
    Infeasible(usize),
    #[error("nonconvex quadratic model: {0}")]
    Nonconvex(String),
    #[error("size cap exceeded: {0}")]
    CapExceeded(String),
    #[error("iteration cap of {0} exceeded")]
    IterationCap(usize),
    #[error("no catalog constants for {0}; supply them explicitly")]
    UnknownLayer(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("certified smoothness is infinite: {0}")]
    Unbounded(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn dim_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Dimension(msg.into()))
}
