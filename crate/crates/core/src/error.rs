use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    /// Argument outside the documented domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),
    #[error("entry position {r} lies within {tol:e} of a discontinuity at {at}")]
    OnDiscontinuity { r: f64, at: f64, tol: f64 },
    #[error("grazing intersection")]
    Grazing,
    #[error("trapped trajectory: bounce cap {0} exceeded")]
    Trapped(usize),
    #[error("shallow-angle formula invalid at angle {phi} (threshold {threshold})")]
    NotShallow { phi: f64, threshold: f64 },
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("kernel construction: {0}")]
    Construction(String),
    #[error("sampling failed after {0} retries: {1}")]
    Sampling(usize, String),
    #[error("discretization: {0}")]
    Discretization(String),
    #[error("eigensolver: {0}")]
    Eigen(String),
    #[error("mass {mass:e} at unit eigenvalue {lambda}")]
    MassAtUnitEigenvalue { lambda: f64, mass: f64 },
    #[error("observable has zero norm")]
    ZeroNorm,
    #[error("numeric: {0}")]
    Numeric(String),
}

impl Error {
    /// True for failures caused by bad arguments rather than by the numerics.
    pub fn is_domain(&self) -> bool {
        matches!(self, Error::Domain(_) | Error::Construction(_) | Error::Unsupported(_))
    }
}
