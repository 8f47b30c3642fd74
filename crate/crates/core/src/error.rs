use std::path::PathBuf;

/// Broad failure classes. The command-line tool maps each one to its own
/// process exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Config,
    Ingestion,
    Numeric,
    Compatibility,
    Internal,
}

impl ErrorCategory {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorCategory::Config => 2,
            ErrorCategory::Ingestion => 3,
            ErrorCategory::Numeric => 4,
            ErrorCategory::Compatibility => 5,
            ErrorCategory::Internal => 70,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ErrorCategory::Config => "config",
            ErrorCategory::Ingestion => "ingestion",
            ErrorCategory::Numeric => "numeric",
            ErrorCategory::Compatibility => "compatibility",
            ErrorCategory::Internal => "internal",
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("contract error: {0}")]
    Contract(String),
    #[error("encoding error in feature `{feature}`: {message}")]
    Encoding { feature: String, message: String },
    #[error("ingestion error: {0}")]
    Ingestion(String),
    #[error("schema error: {0}")]
    Schema(String),
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),
    #[error("degenerate attention row: {0}")]
    DegenerateRow(String),
    #[error("compatibility error: {0}")]
    Compatibility(String),
    #[error("format error in {path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Config(_) => ErrorCategory::Config,
            Error::Encoding { .. }
            | Error::Ingestion(_)
            | Error::Schema(_)
            | Error::Io { .. }
            | Error::Format { .. } => ErrorCategory::Ingestion,
            Error::Numeric(_) | Error::UndefinedMetric(_) | Error::DegenerateRow(_) => {
                ErrorCategory::Numeric
            }
            Error::Compatibility(_) => ErrorCategory::Compatibility,
            Error::Dimension(_) | Error::Contract(_) => ErrorCategory::Internal,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl ToString) -> Self {
        Error::Format {
            path: path.into(),
            message: message.to_string(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
