use std::path::PathBuf;

use stg_core::ErrorClass;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error("missing input: {0} does not exist")]
    MissingInput(PathBuf),

    #[error("output directory {0} exists and is not empty (pass --force to replace it)")]
    OutputNotEmpty(PathBuf),

    #[error("gradient check failed: {0}")]
    GradcheckFailed(String),

    #[error(transparent)]
    Core(#[from] stg_core::Error),

    #[error("io error on {path:?}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::OutputNotEmpty(_) => EXIT_USAGE,
            CliError::MissingInput(_) | CliError::Io { .. } => EXIT_DATA,
            CliError::GradcheckFailed(_) => EXIT_NUMERICAL,
            CliError::Core(e) => match e.class() {
                ErrorClass::Usage => EXIT_USAGE,
                ErrorClass::Data => EXIT_DATA,
                ErrorClass::Numerical => EXIT_NUMERICAL,
            },
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
