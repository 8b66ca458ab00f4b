use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid {field}: {reason}")]
    Validation { field: &'static str, reason: String },

    #[error("sequence exceeds positional table ({n} > {max} tokens)")]
    SequenceTooLong { n: usize, max: usize },

    #[error("numeric overflow in scan")]
    NumericOverflow,

    #[error("non-finite loss at step {step}")]
    Diverged { step: usize },

    #[error("checkpoint does not match config: {0}")]
    Shape(String),

    #[error(transparent)]
    Core(#[from] flowmark_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl ModelError {
    pub(crate) fn invalid(field: &'static str, reason: impl Into<String>) -> Self {
        ModelError::Validation {
            field,
            reason: reason.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, ModelError>;
