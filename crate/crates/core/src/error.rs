use alloc::string::String;

/// Errors raised by the numerical core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch, expected {expected:?}, found {found:?}")]
    Shape {
        op: &'static str,
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("matrix is not symmetric (max asymmetry {max_asymmetry:e})")]
    NotSymmetric { max_asymmetry: f64 },
    #[error("matrix is not positive semidefinite (eigenvalue {eigenvalue:e}, lambda_max {lambda_max:e})")]
    NotPsd { eigenvalue: f64, lambda_max: f64 },
    #[error("eigendecomposition did not converge after {iterations} iterations")]
    NoConvergence { iterations: usize },
    #[error("matrix is singular after damping")]
    Singular,
    #[error("non-finite gradient entry {value} at ({row}, {col}) of parameter `{param}`")]
    NonFinite {
        param: String,
        row: usize,
        col: usize,
        value: f64,
    },
    #[error("invalid input: {0}")]
    Validation(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("state error: {0}")]
    State(String),
    #[error("task error: {0}")]
    Task(String),
}

pub type Result<T> = core::result::Result<T, Error>;

impl Error {
    /// Attach a parameter name to a [`Error::NonFinite`] diagnostic.
    pub fn for_param(self, name: &str) -> Self {
        match self {
            Error::NonFinite { row, col, value, .. } => Error::NonFinite {
                param: name.into(),
                row,
                col,
                value,
            },
            other => other,
        }
    }
}
