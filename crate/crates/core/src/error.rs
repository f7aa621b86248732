use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid parameters or configuration; maps to CLI exit code 2.
    #[error("configuration error: {0}")]
    Config(String),
    #[error("missing configuration key `{0}`")]
    MissingKey(String),
    #[error("stale input: {0}")]
    StaleInput(String),
    #[error("numerical error: {0}")]
    Numerical(String),
    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("{0}")]
    Runtime(String),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn context(self, context: impl Into<String>) -> Self {
        Error::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }

    /// True if the root cause is a configuration problem.
    pub fn is_config(&self) -> bool {
        match self {
            Error::Config(_) | Error::MissingKey(_) => true,
            Error::Context { source, .. } => source.is_config(),
            _ => false,
        }
    }
}
