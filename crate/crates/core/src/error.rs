use thiserror::Error;

pub type Result<T> = std::result::Result<T, LabError>;

#[derive(Debug, Error)]
pub enum LabError {
    /// Caller supplied inconsistent shapes, empty inputs or violated a precondition.
    #[error("usage error: {0}")]
    Usage(String),

    #[error("matrix is not positive semidefinite (smallest eigenvalue {min_eigenvalue:e}){}", location_suffix(.location))]
    NotPsd {
        min_eigenvalue: f64,
        location: Option<Vec<f64>>,
    },

    #[error("contraction property violated: {what} (margin {margin:e})")]
    ContractionViolated { what: String, margin: f64 },

    #[error("Picard iteration did not converge in {iterations} iterations; ratios {ratios:?}")]
    NonConvergence { iterations: usize, ratios: Vec<f64> },

    #[error("numerical failure: {0}")]
    Numerical(String),
}

fn location_suffix(loc: &Option<Vec<f64>>) -> String {
    match loc {
        Some(x) => format!(" at x = {x:?}"),
        None => String::new(),
    }
}

impl LabError {
    pub fn usage(msg: impl Into<String>) -> Self {
        LabError::Usage(msg.into())
    }

    pub fn numerical(msg: impl Into<String>) -> Self {
        LabError::Numerical(msg.into())
    }
}
