//! Error type shared across the crate.
//!
//! Three user-facing classes map onto CLI exit codes: configuration problems,
//! data problems (including unreadable or malformed files), and contract
//! violations (an API used against its documented preconditions). Misuse of
//! the low-level math ops (shape mismatches and the like) panics instead:
//! those are programming errors, not runtime conditions.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("contract violation: {0}")]
    Contract(String),

    /// Malformed checkpoint file; `offset` is the byte position where parsing failed.
    #[error("checkpoint format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
}
