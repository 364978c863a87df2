use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("matrix is rank deficient (|r_{index}{index}| = {value:e})")]
    RankDeficient { index: usize, value: f64 },

    #[error("power iteration did not converge after {iterations} iterations")]
    NoConvergence { iterations: usize },

    #[error("pole in component {component}: 1 - (A_c x)_j = {denominator:e}")]
    Pole { component: usize, denominator: f64 },

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("step size underflow at t = {t} (h = {h:e}); problem may be stiff")]
    StepUnderflow { t: f64, h: f64 },

    #[error("unknown builtin matrix `{0}`")]
    UnknownMatrix(String),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("serialization: {0}")]
    Serde(String),
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}
