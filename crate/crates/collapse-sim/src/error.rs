use thiserror::Error;

/// Errors produced by model construction, simulation, and I/O.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("length mismatch: expected {expected}, got {got} ({context})")]
    LengthMismatch {
        expected: usize,
        got: usize,
        context: &'static str,
    },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("resource cap exceeded: {0}")]
    ResourceCap(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}
