use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum A2jError {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("geometry error: {0}")]
    Geometry(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("corrupt data: {0}")]
    Corrupt(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, A2jError>;
