use std::path::PathBuf;

/// Every failure the toolkit can report.
///
/// Variants split into two families: validation-style problems (bad files,
/// shapes, configuration) and numerical failures (non-finite values produced
/// during a computation). The CLI maps the first family to exit code 1 and the
/// second to exit code 2.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("truncated payload in {path}: expected {expected} bytes, found {found}")]
    Truncation {
        path: PathBuf,
        expected: usize,
        found: usize,
    },

    #[error("validation error in `{field}`: {reason}")]
    Validation { field: String, reason: String },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("empty mask: no valid pixels to evaluate")]
    EmptyMask,

    #[error("rank error: {0}")]
    Rank(String),

    #[error("numerical error in `{op}`: {detail}")]
    Numerical { op: String, detail: String },

    #[error("config error: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn validation(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Validation {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub fn numerical(op: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Numerical {
            op: op.into(),
            detail: detail.into(),
        }
    }

    /// Process exit code for this error: 2 for numerical failures, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numerical { .. } => 2,
            _ => 1,
        }
    }
}
