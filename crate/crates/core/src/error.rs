use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("format error at byte {position}: {message}")]
    Format { position: usize, message: String },
    #[error("model mismatch: {0}")]
    Model(String),
    #[error("provider state error: {0}")]
    State(String),
    #[error("stream integrity error: {0}")]
    Integrity(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn contract(msg: impl Into<String>) -> Error {
    Error::Contract(msg.into())
}

pub(crate) fn format_err(position: usize, msg: impl Into<String>) -> Error {
    Error::Format { position, message: msg.into() }
}
