use serde_json::json;
use thiserror::Error;

/// Exit code 2: bad input or configuration.
pub const EXIT_VALIDATION: i32 = 2;
/// Exit code 3: failure while running a valid request.
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn validation(msg: impl Into<String>) -> Self {
        CliError::Validation(msg.into())
    }

    pub fn runtime(msg: impl Into<String>) -> Self {
        CliError::Runtime(msg.into())
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => EXIT_VALIDATION,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }

    /// The machine-readable form printed on stderr.
    pub fn to_json(&self) -> String {
        let kind = match self {
            CliError::Validation(_) => "validation",
            CliError::Runtime(_) => "runtime",
        };
        json!({"error": {"kind": kind, "code": self.exit_code(), "message": self.to_string()}})
            .to_string()
    }
}

impl From<flowmark_core::Error> for CliError {
    fn from(e: flowmark_core::Error) -> Self {
        use flowmark_core::Error as E;
        match e {
            E::Validation { .. } | E::PacketExceedsCapacity { .. } | E::Stratification(_) => {
                CliError::Validation(e.to_string())
            }
            E::Trace(_) | E::ZeroWeight | E::Json(_) => CliError::Validation(e.to_string()),
            E::Io(_) => CliError::Runtime(e.to_string()),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

pub(crate) fn from_model(e: flowmark_model::ModelError) -> CliError {
    use flowmark_model::ModelError as M;
    match e {
        M::Core(c) => c.into(),
        M::Io(_) | M::NumericOverflow | M::Diverged { .. } => CliError::Runtime(e.to_string()),
        M::Validation { .. } | M::SequenceTooLong { .. } | M::Shape(_) | M::Json(_) => {
            CliError::Validation(e.to_string())
        }
    }
}

impl From<flowmark_model::ModelError> for CliError {
    fn from(e: flowmark_model::ModelError) -> Self {
        from_model(e)
    }
}
