use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("numerical error in {module}: {message}")]
    Numerical { module: String, message: String },

    #[error("identifiability error: {0}")]
    Identifiability(String),

    #[error("separation detected: {0}")]
    Separation(String),

    #[error("contract violation: {0}")]
    Contract(String),
}

impl Error {
    pub fn numerical(module: &str, message: impl Into<String>) -> Self {
        Error::Numerical {
            module: module.to_string(),
            message: message.into(),
        }
    }

    /// Exit code convention: 2 for input/contract problems, 3 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io(_) | Error::Csv(_) | Error::Parse { .. } | Error::Validation(_) | Error::Contract(_) => 2,
            Error::Numerical { .. } | Error::Identifiability(_) | Error::Separation(_) => 3,
        }
    }
}
