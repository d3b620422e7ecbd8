use thiserror::Error;

pub type Result<T> = std::result::Result<T, LabError>;

#[derive(Debug, Error)]
pub enum LabError {
    /// The requested operation exceeds what exhaustive enumeration supports.
    #[error("capability exceeded: {0}")]
    Capability(String),

    #[error("invalid input: {0}")]
    Validation(String),

    /// Out-of-order, stale or duplicate interaction with an elicitation session.
    #[error("protocol violation: {0}")]
    Protocol(String),

    #[error("{context}: {source}")]
    Run {
        context: String,
        #[source]
        source: Box<LabError>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl LabError {
    pub fn validation(msg: impl Into<String>) -> Self {
        LabError::Validation(msg.into())
    }

    pub fn protocol(msg: impl Into<String>) -> Self {
        LabError::Protocol(msg.into())
    }

    pub fn capability(msg: impl Into<String>) -> Self {
        LabError::Capability(msg.into())
    }

    /// Wraps an error with the run that produced it.
    pub fn in_context(self, context: impl Into<String>) -> Self {
        LabError::Run {
            context: context.into(),
            source: Box::new(self),
        }
    }
}
