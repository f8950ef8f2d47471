use std::path::PathBuf;

use diffkan_core::Error as CoreError;

/// Failure of a CLI command, grouped by exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("incompatible: {0}")]
    Incompatible(String),

    #[error("{0}")]
    Runtime(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type CliResult<T> = Result<T, CliError>;

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) | CliError::Io { .. } => 3,
            CliError::Incompatible(_) => 4,
            CliError::Runtime(_) => 1,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::Config(m) => CliError::Config(m),
            CoreError::Incompatible(m) => CliError::Incompatible(m),
            CoreError::Validation(m) => CliError::Data(m),
            e @ CoreError::Parse { .. } => CliError::Config(e.to_string()),
            e @ (CoreError::Format { .. } | CoreError::Io { .. } | CoreError::Dimension { .. }) => {
                CliError::Data(e.to_string())
            }
            e @ (CoreError::Contract { .. } | CoreError::NonFinite { .. }) => CliError::Runtime(e.to_string()),
        }
    }
}
