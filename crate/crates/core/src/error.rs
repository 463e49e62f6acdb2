use thiserror::Error;

/// Errors raised by traces, distributions, combinators, and the training loop.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("address {0:?} is already recorded in the trace")]
    DuplicateAddress(String),
    #[error("address collision at {0:?} while merging traces")]
    AddressCollision(String),
    #[error("invalid address: {0}")]
    InvalidAddress(String),
    #[error("invalid value: {0}")]
    InvalidValue(String),
    #[error("invalid distribution parameters: {0}")]
    InvalidParams(String),
    #[error("value is outside the support of {0}")]
    OffSupport(String),
    #[error("latent address {0:?} is missing from the conditioning trace")]
    MissingLatent(String),
    #[error("arity mismatch: expected {expected} inputs, got {got}")]
    Arity { expected: usize, got: usize },
    #[error("unsupported proposal: {0}")]
    UnsupportedProposal(String),
    #[error("every particle has zero weight{}", .step.map(|s| format!(" at step {s}")).unwrap_or_default())]
    AllWeightsZero { step: Option<usize> },
    #[error("non-finite gradient in parameter {0:?}")]
    NonFiniteGradient(String),
    #[error("unknown parameter {0:?}")]
    UnknownParameter(String),
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),
    #[error("numerical underflow: {0}")]
    NumericalUnderflow(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
