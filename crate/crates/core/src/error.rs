use alloc::string::String;

/// Errors produced by the numeric core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid spec: {0}")]
    InvalidSpec(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite value at flat index {index}")]
    NonFinite { index: usize },

    #[error("dimension {0} is not a power of two (Sylvester Hadamard only)")]
    NotPowerOfTwo(usize),

    #[error("Hessian is not positive definite after damping (pivot {pivot} at column {column}); increase the damping fraction")]
    SingularHessian { column: usize, pivot: f64 },

    #[error("Cayley system is singular; reduce the step size")]
    StepTooLarge,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub type Result<T> = core::result::Result<T, Error>;
