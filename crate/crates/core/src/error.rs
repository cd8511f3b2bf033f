use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: String, reason: String },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("operation implemented for d = 3 only, got d = {0}")]
    UnsupportedDimension(usize),

    #[error("time step {dt:.3e} exceeds the admissible bound {bound:.3e}")]
    Cfl { dt: f64, bound: f64 },

    #[error("radii rule violates the sum constraint: partial sum {sum} exceeds 1/2")]
    RadiiSum { sum: f64 },

    #[error("degenerate test family: {0}")]
    DegenerateFamily(String),

    #[error("{0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn param(name: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name: name.into(),
            reason: reason.into(),
        }
    }
}
