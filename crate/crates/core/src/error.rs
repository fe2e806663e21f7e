use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid mesh: {0}")]
    Mesh(String),

    #[error("field length {got} does not match mesh size {expected}")]
    Shape { expected: usize, got: usize },

    #[error("ellipticity violated: coefficient {value} at point {index} is below c0 = {c0}")]
    Ellipticity { index: usize, value: f64, c0: f64 },

    #[error("invalid scenario tree: {0}")]
    Tree(String),

    #[error("invalid weight parameters: {0}")]
    Weights(String),

    #[error("weight is singular at t = {t}; use a regularized variant")]
    Singular { t: f64 },

    #[error("t = {t} is outside the evaluable range of the {variant} weight")]
    OutOfRange { t: f64, variant: &'static str },

    #[error("degenerate weight base: {0}")]
    DegenerateBase(String),

    #[error("stability guard violated: {0}")]
    Stability(String),

    #[error("estimate/data mismatch: {0}")]
    EstimateData(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("adjoint gate failed: relative discrepancy {0:e}")]
    AdjointGate(f64),

    #[error("numerical failure: {0}")]
    Numerical(String),
}
