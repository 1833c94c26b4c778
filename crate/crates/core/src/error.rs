use thiserror::Error;

use crate::nn::HeadId;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("unknown head {0}")]
    UnknownHead(HeadId),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("invalid state: {0}")]
    State(String),

    #[error("unsupported objective: {0}")]
    UnsupportedObjective(String),

    #[error("estimator mismatch: cannot combine {left} with {right}")]
    MethodMismatch { left: String, right: String },

    #[error("unknown method `{tag}` (valid: {valid})")]
    UnknownMethod { tag: String, valid: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },

    #[error("invalid config:\n{}", .0.join("\n"))]
    Validation(Vec<String>),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }
}
