use thiserror::Error;

/// Errors produced by the back-end library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// A file did not conform to its documented format.
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    /// Inputs were well-formed but semantically unusable (dimension
    /// mismatches, missing labels, insufficient data, ...).
    #[error("{0}")]
    Data(String),

    /// A numerical operation failed (singular covariance, zero norm,
    /// likelihood underflow, ...).
    #[error("{0}")]
    Numeric(String),

    /// Bad configuration or recipe supplied by the caller.
    #[error("{0}")]
    Config(String),
}

impl Error {
    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn parse(path: &std::path::Path, line: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            path: path.display().to_string(),
            line,
            msg: msg.into(),
        }
    }

    /// Stable machine-readable category, also used for process exit codes:
    /// `config` -> 1, `data` -> 2, `numeric` -> 3.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Numeric(_) => "numeric",
            Error::Io(_) | Error::Parse { .. } | Error::Data(_) => "data",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
