use thiserror::Error;

#[derive(Debug, Error)]
pub enum GridError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("numeric error in {layer}: {message}")]
    Numeric { layer: String, message: String },
    #[error("state error: {0}")]
    State(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("internal error: {0}")]
    Internal(String),
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, GridError>;
