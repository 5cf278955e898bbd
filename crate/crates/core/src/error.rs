use thiserror::Error;

#[derive(Debug, Error)]
pub enum UstdError {
    #[error("invalid input: {0}")]
    Input(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl UstdError {
    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            UstdError::Config(_) | UstdError::Shape(_) | UstdError::Contract(_) => 2,
            UstdError::Input(_) | UstdError::Format(_) | UstdError::Io(_) => 3,
            UstdError::Numeric(_) => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, UstdError>;

pub(crate) fn input(msg: impl Into<String>) -> UstdError {
    UstdError::Input(msg.into())
}
