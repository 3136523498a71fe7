use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid tensor: {0}")]
    InvalidTensor(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("{buffer} capacity exceeded: need {needed} bytes, have {capacity}")]
    Capacity {
        buffer: String,
        needed: usize,
        capacity: usize,
    },

    #[error("malformed packed buffer: {0}")]
    MalformedBuffer(String),

    #[error("output stream: {0}")]
    Stream(String),

    #[error("crossbar: {0}")]
    Crossbar(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("model: {0}")]
    Model(String),

    #[error(transparent)]
    Sim(#[from] crate::sim::SimError),
}

impl Error {
    pub(crate) fn dims(msg: impl Into<String>) -> Self {
        Error::DimensionMismatch(msg.into())
    }

    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }
}
