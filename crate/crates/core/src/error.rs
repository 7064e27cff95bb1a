//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum GoraError {
    #[error("shape mismatch in {op}: left is {left:?}, right is {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("Gram matrix singular: {0}")]
    SingularGram(String),

    #[error("dimension cap exceeded: min(rows, cols) = {got} > {cap}")]
    DimensionCap { got: usize, cap: usize },

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("stage order: {0}")]
    StageOrder(String),

    #[error("artifact format: {0}")]
    Format(String),

    #[error("verification failed: {0}")]
    Verification(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl GoraError {
    /// Process exit code for the CLI: 1 config/usage, 2 numerical, 3 verification.
    pub fn exit_code(&self) -> i32 {
        match self {
            GoraError::Config(_)
            | GoraError::StageOrder(_)
            | GoraError::Format(_)
            | GoraError::Io(_) => 1,
            GoraError::Verification(_) => 3,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, GoraError>;
