use std::path::PathBuf;

/// Errors produced anywhere in the core library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Operand shapes disagree. `axes` names the offending axes.
    #[error("{op}: dimension mismatch on {axes}: {detail}")]
    Dimension {
        op: &'static str,
        axes: String,
        detail: String,
    },

    /// A precondition of an operation was violated by the caller.
    #[error("{op}: contract violation: {detail}")]
    Contract { op: &'static str, detail: String },

    /// Invalid configuration value.
    #[error("config error: {0}")]
    Config(String),

    /// Architecture string could not be parsed.
    #[error("invalid architecture string {input:?}: {reason} at index {position}")]
    Parse {
        input: String,
        position: usize,
        reason: String,
    },

    /// Input data failed validation (non-binary mask, out-of-range intensity, ...).
    #[error("validation error: {0}")]
    Validation(String),

    /// A NaN or infinity appeared while finite checking was enabled.
    #[error("{op}: non-finite value in output")]
    NonFinite { op: &'static str },

    /// Checkpoint or weights do not match the model they are loaded into.
    #[error("incompatible: {0}")]
    Incompatible(String),

    /// Malformed file contents.
    #[error("{path}: {detail}")]
    Format { path: PathBuf, detail: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn dim(op: &'static str, axes: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            axes: axes.into(),
            detail: detail.into(),
        }
    }

    pub(crate) fn contract(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Contract {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
