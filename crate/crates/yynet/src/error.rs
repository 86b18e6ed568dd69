//! Application-level errors and their process exit codes.

use std::fmt;

#[derive(Debug, Clone, PartialEq)]
pub enum AppError {
    /// Bad usage, configuration or internal contract violation.
    Config(String),
    /// Filesystem problems.
    Io(String),
    /// A file exists but its contents are malformed.
    Format(String),
    /// Dataset content errors.
    Data(String),
    /// Non-finite loss or gradients during training.
    Diverged(String),
}

pub type AppResult<T> = Result<T, AppError>;

impl fmt::Display for AppError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AppError::Config(m) => write!(f, "config error: {m}"),
            AppError::Io(m) => write!(f, "io error: {m}"),
            AppError::Format(m) => write!(f, "format error: {m}"),
            AppError::Data(m) => write!(f, "data error: {m}"),
            AppError::Diverged(m) => write!(f, "training diverged: {m}"),
        }
    }
}

impl std::error::Error for AppError {}

impl From<yynet_core::Error> for AppError {
    fn from(e: yynet_core::Error) -> Self {
        match e {
            yynet_core::Error::Config(m) | yynet_core::Error::Shape(m) | yynet_core::Error::State(m) => {
                AppError::Config(m)
            }
            yynet_core::Error::Data(m) => AppError::Data(m),
            yynet_core::Error::TrainingDiverged(m) => AppError::Diverged(m),
        }
    }
}

impl AppError {
    /// 0 success, 1 usage/config, 2 data, 3 diverged.
    pub fn exit_code(&self) -> i32 {
        match self {
            AppError::Config(_) => 1,
            AppError::Io(_) | AppError::Format(_) | AppError::Data(_) => 2,
            AppError::Diverged(_) => 3,
        }
    }
}
