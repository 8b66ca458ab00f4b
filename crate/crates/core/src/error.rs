use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid {field}: {reason}")]
    Validation { field: &'static str, reason: String },

    #[error("packet exceeds bucket capacity ({size} > {capacity} bytes)")]
    PacketExceedsCapacity { size: u32, capacity: f64 },

    #[error("malformed trace: {0}")]
    Trace(String),

    #[error("stratification error: {0}")]
    Stratification(String),

    #[error("total weight is zero")]
    ZeroWeight,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(field: &'static str, reason: impl Into<String>) -> Self {
        Error::Validation {
            field,
            reason: reason.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
