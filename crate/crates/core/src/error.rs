use thiserror::Error;

/// Errors produced by any layer of the simulator.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or model shapes do not conform.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// A documented API precondition was violated.
    #[error("contract violation: {0}")]
    Contract(String),

    /// An index (label, client id, ...) is out of range.
    #[error("index out of range: {0}")]
    Index(String),

    /// A NaN or infinity was detected where finite values are required.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// A binary file (IDX, checkpoint) failed to decode.
    #[error("format error in {field}: {message}")]
    Format { field: String, message: String },

    /// Dataset partitioning failed.
    #[error("partition error: {0}")]
    Partition(String),

    /// A configuration key is unknown, mistyped, or out of range.
    #[error("config key `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    /// Wraps an error with the federated round it occurred in.
    #[error("round {round} ({module}): {source}")]
    InRound {
        round: usize,
        module: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn dimension(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn format(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Format {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: message.into(),
        }
    }

    /// Attaches round context while propagating out of an orchestration loop.
    pub fn in_round(self, round: usize, module: &'static str) -> Self {
        Error::InRound {
            round,
            module,
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
