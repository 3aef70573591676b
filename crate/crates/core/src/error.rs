use thiserror::Error;

/// Errors raised by the geometry, field, solver and verification layers.
///
/// `Hypothesis` is kept separate from the other variants because a failed
/// hypothesis gate means the conclusion of an inequality was never evaluated,
/// which callers (the CLI in particular) report differently from a numerical
/// failure.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid parameter `{name}`: {detail}")]
    InvalidParameter { name: &'static str, detail: String },

    #[error("hypothesis `{name}` failed: {detail}")]
    Hypothesis { name: &'static str, detail: String },

    #[error("region does not overlap the grid")]
    EmptyRegion,

    #[error("CFL violation: dt = {dt:.3e} exceeds limit {limit:.3e} ({which})")]
    Cfl { dt: f64, limit: f64, which: &'static str },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("unsupported configuration: {0}")]
    Unsupported(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("parse error: {0}")]
    Parse(String),
}

impl Error {
    pub(crate) fn param(name: &'static str, detail: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            detail: detail.into(),
        }
    }

    pub(crate) fn hypothesis(name: &'static str, detail: impl Into<String>) -> Self {
        Error::Hypothesis {
            name,
            detail: detail.into(),
        }
    }

    pub fn is_hypothesis(&self) -> bool {
        matches!(self, Error::Hypothesis { .. })
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
