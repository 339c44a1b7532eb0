use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

/// Failure modes shared by every layer of the pipeline.
///
/// Each variant maps to a stable, machine-parsable class name (see
/// [`Error::class`]) which the CLI prints on failure.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{0}")]
    Domain(String),
    #[error("{0}")]
    Format(String),
    #[error("{0}")]
    Consistency(String),
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Numeric(String),
    #[error("{0}")]
    Leakage(String),
    #[error("{0}")]
    Contract(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn class(&self) -> &'static str {
        match self {
            Error::Domain(_) => "domain",
            Error::Format(_) => "format",
            Error::Consistency(_) => "consistency",
            Error::Config(_) => "config",
            Error::Numeric(_) => "numeric",
            Error::Leakage(_) => "leakage",
            Error::Contract(_) => "contract",
            Error::Io { .. } => "io",
        }
    }

    /// Prefixes the message, keeping the class.
    pub fn context(self, prefix: impl std::fmt::Display) -> Self {
        let wrap = |m: String| format!("{prefix}: {m}");
        match self {
            Error::Domain(m) => Error::Domain(wrap(m)),
            Error::Format(m) => Error::Format(wrap(m)),
            Error::Consistency(m) => Error::Consistency(wrap(m)),
            Error::Config(m) => Error::Config(wrap(m)),
            Error::Numeric(m) => Error::Numeric(wrap(m)),
            Error::Leakage(m) => Error::Leakage(wrap(m)),
            Error::Contract(m) => Error::Contract(wrap(m)),
            io @ Error::Io { .. } => io,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

macro_rules! bail {
    ($kind:ident, $($arg:tt)*) => {
        return Err($crate::error::Error::$kind(format!($($arg)*)))
    };
}
pub(crate) use bail;
