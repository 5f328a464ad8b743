use alloc::string::String;
use alloc::vec::Vec;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("NNLS did not converge after {iterations} iterations (KKT residual {residual:e})")]
    NnlsNoConvergence { iterations: usize, residual: f64 },

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("time {time} outside [0, {horizon}]")]
    TimeOutOfRange { time: f64, horizon: f64 },

    #[error("vector is not in the cone; nearest feasible point is {projected:?}")]
    NotInCone { projected: Vec<f64> },

    #[error("singular regression at node {node} with basis degree {degree}; try a lower basis degree")]
    SingularRegression { node: usize, degree: usize },

    #[error("implicit step did not converge at node {node}")]
    FixedPointNoConvergence { node: usize },

    #[error("grid mismatch: {0}")]
    GridMismatch(String),
}

impl Error {
    pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter { name, reason: reason.into() }
    }
}
