use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A physical input outside the domain of the formula (negative
    /// frequency, non-finite field, non-positive time...).
    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    /// The sampled field cannot represent its own phase content.
    #[error("aliasing: {0}")]
    Aliasing(String),

    /// An iterative procedure failed or the problem is numerically degenerate.
    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }

    pub fn parse(line: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            line,
            msg: msg.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Parse { .. } | Error::Domain(_) => 2,
            Error::Aliasing(_) | Error::Numerical(_) => 3,
            Error::Io { .. } => 4,
        }
    }

    /// Short machine-parsable category tag.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Domain(_) => "domain",
            Error::Config(_) => "config",
            Error::Aliasing(_) => "aliasing",
            Error::Numerical(_) => "numerical",
            Error::Parse { .. } => "parse",
            Error::Io { .. } => "io",
        }
    }
}
