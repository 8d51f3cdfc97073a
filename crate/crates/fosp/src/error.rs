//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum FospError {
    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    Shape {
        context: String,
        expected: String,
        actual: String,
    },

    #[error("non-finite value in {component}: {detail}")]
    NonFinite { component: String, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("file format error at byte offset {offset}: {detail}")]
    Format { offset: u64, detail: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("no feasible zero-cost policy exists: {0}")]
    Infeasible(String),

    #[error("unsupported operation: {0}")]
    Unsupported(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl FospError {
    pub fn shape(context: impl Into<String>, expected: impl Into<String>, actual: impl Into<String>) -> Self {
        FospError::Shape {
            context: context.into(),
            expected: expected.into(),
            actual: actual.into(),
        }
    }

    pub fn non_finite(component: impl Into<String>, detail: impl Into<String>) -> Self {
        FospError::NonFinite {
            component: component.into(),
            detail: detail.into(),
        }
    }
}
