use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("graph is disconnected ({components} components)")]
    DisconnectedGraph { components: usize },

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("weight graph is disconnected ({components} components); V has rank < n-1")]
    DegenerateWeights { components: usize },

    #[error("numerical failure: {0}")]
    NumericalFailure(String),

    #[error("parse error at {path}:{line}: {msg}")]
    Parse { path: String, line: u64, msg: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}
