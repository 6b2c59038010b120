use thiserror::Error;

/// Errors raised by the estimation stack.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    Shape {
        context: &'static str,
        expected: String,
        got: String,
    },

    #[error("metric undefined: {0}")]
    UndefinedMetric(&'static str),

    #[error("infeasible pilot pattern: {0}")]
    InfeasiblePattern(String),

    #[error("group {0} has no subcarriers")]
    EmptyGroup(usize),

    #[error("serialization: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape(context: &'static str, expected: impl ToString, got: impl ToString) -> Error {
    Error::Shape {
        context,
        expected: expected.to_string(),
        got: got.to_string(),
    }
}
