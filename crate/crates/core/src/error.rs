use thiserror::Error;

pub type Result<T> = std::result::Result<T, RoddError>;

#[derive(Debug, Error)]
pub enum RoddError {
    /// A caller broke an operation's precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("numeric failure in {what}: residual {residual:e}")]
    NumericFailure { what: String, residual: f64 },

    #[error("degenerate feature at sample {index}: norm {norm:e} below 1e-12")]
    DegenerateFeature { index: usize, norm: f64 },

    #[error("training diverged at epoch {epoch}: loss {loss}")]
    Divergence { epoch: usize, loss: f64 },

    #[error("matrix is not positive semidefinite: eigenvalue {min_eigenvalue:e}")]
    NotPsd { min_eigenvalue: f64 },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("parse error on line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl RoddError {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        RoddError::Contract(msg.into())
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        RoddError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// True for errors caused by numerics rather than by bad input.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            RoddError::NumericFailure { .. }
                | RoddError::DegenerateFeature { .. }
                | RoddError::Divergence { .. }
                | RoddError::NotPsd { .. }
        )
    }
}
