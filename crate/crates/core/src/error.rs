use thiserror::Error;

/// Errors raised by the model library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// An argument outside the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// A configuration that is internally inconsistent or incomplete.
    #[error("config error at `{path}`: {msg}")]
    Config { path: String, msg: String },

    /// Malformed or inconsistent input data.
    #[error("data error: {0}")]
    Data(String),

    /// A numerical failure (factorization, non-finite likelihood, ...).
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// Every kernel in a weight-matrix row underflowed or was non-finite.
    #[error("degenerate kernel row for site {site}: no finite kernel value")]
    DegenerateRow { site: usize },

    #[error("io error: {0}")]
    Io(String),
}

impl Error {
    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub fn config(path: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            msg: msg.into(),
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Data(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
