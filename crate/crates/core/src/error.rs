use thiserror::Error;

/// Errors surfaced by the simulator and its drivers.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SimError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("address {address:#x} is outside the configured address space of {limit:#x} bytes")]
    AddressOutOfRange { address: u64, limit: u64 },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("core {core} deadlocked at cycle {cycle}: {diagnostic}")]
    Deadlock {
        core: usize,
        cycle: u64,
        diagnostic: String,
    },
}

impl SimError {
    pub fn config(msg: impl Into<String>) -> Self {
        SimError::Config(msg.into())
    }

    pub fn parse(line: usize, msg: impl Into<String>) -> Self {
        SimError::Parse {
            line,
            message: msg.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, SimError>;
