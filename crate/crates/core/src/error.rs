use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller broke an operation's precondition (shape, length, id).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("unknown agent id {0}")]
    UnknownAgent(usize),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("scenario generation failed: {0}")]
    Scenario(String),

    #[error("training error: {0}")]
    Training(String),

    #[error("state ranking failed: {0}")]
    Ranking(String),

    #[error("optimizer error: {0}")]
    Optimizer(String),

    #[error("policy assembly error: {0}")]
    Policy(String),

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn contract(msg: impl Into<String>) -> Error {
    Error::Contract(msg.into())
}
