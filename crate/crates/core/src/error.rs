use thiserror::Error;

/// Errors surfaced by the library. Contract violations indicate caller bugs
/// (bad shapes, invalid arguments); the numeric variants are runtime
/// conditions the training loop is expected to handle.
#[derive(Error, Debug)]
pub enum Error {
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("shape mismatch: expected {expected:?}, got {got:?} in {context}")]
    ShapeMismatch {
        expected: Vec<usize>,
        got: Vec<usize>,
        context: &'static str,
    },

    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("non-finite state at integration step {step}")]
    NonFiniteState { step: usize },

    #[error("training aborted in stage `{stage}` at step {step}: {reason}")]
    TrainingAbort {
        stage: String,
        step: usize,
        reason: String,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
}
