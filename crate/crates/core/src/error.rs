use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    Input(String),

    #[error("capacity exceeded: {0}")]
    Capacity(String),

    #[error("on-policy violation: batch was generated by snapshot {expected:016x}, params are {found:016x}")]
    OnPolicy { expected: u64, found: u64 },

    #[error("config key `{key}`: {msg}")]
    Config { key: String, msg: String },

    #[error("cache: {0}")]
    Cache(#[from] crate::sampler::CacheError),

    #[error("round aborted: {0}")]
    RoundAborted(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn input<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Input(msg.into()))
}
