use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid parameter `{field}`: {reason}")]
    InvalidParam { field: String, reason: String },

    #[error("`{name}` is not positive definite: leading minor of order {order} is not positive")]
    NotPositiveDefinite { name: String, order: usize },

    #[error("singular matrix `{0}`")]
    Singular(String),

    #[error("singular innovation covariance at step {step}")]
    SingularInnovation { step: usize },

    #[error("non-finite exponent in {quantity} at step {step}")]
    Overflow { quantity: &'static str, step: usize },

    #[error("insufficient sample: need at least {need} observations, got {got}")]
    InsufficientSample { need: usize, got: usize },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("empty sample")]
    EmptySample,

    #[error(
        "bisection failed to bracket target {target}: X({lo:e}) = {x_lo:e}, X({hi:e}) = {x_hi:e}"
    )]
    NoBracket {
        target: f64,
        lo: f64,
        hi: f64,
        x_lo: f64,
        x_hi: f64,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn param(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidParam {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
}
