use thiserror::Error;

pub type Result<T, E = MceError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum MceError {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("index {index} out of range for {what} (limit {limit})")]
    Index {
        what: &'static str,
        index: usize,
        limit: usize,
    },

    #[error("invalid configuration `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("value oracle failed on subset {subset:#b}: {message}")]
    Oracle { subset: u64, message: String },

    #[error("non-finite {component} loss at step {step}")]
    Divergence { component: &'static str, step: usize },

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl MceError {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        MceError::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }
}
