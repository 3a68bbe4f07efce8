use thiserror::Error;

/// Errors produced by the simulation and estimation routines.
#[derive(Debug, Error)]
pub enum Error {
    #[error("box of {sites} sites exceeds the capacity limit of {limit} sites")]
    Capacity { sites: u128, limit: u64 },

    #[error("invalid geometry: {0}")]
    Geometry(String),

    #[error("invalid parameter `{name}`: {reason}")]
    Parameter { name: &'static str, reason: String },

    #[error("input set is empty")]
    EmptyInput,

    #[error("enumeration over {sites} sites exceeds the cap of {cap} sites")]
    EnumerationCap { sites: usize, cap: usize },

    #[error("no observations reach the tail window starting at {start}")]
    EmptyTailWindow { start: u64 },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("target probability {target:e} is below the tail resolution {floor:e}")]
    BelowResolution { target: f64, floor: f64 },

    #[error("{censored} of {total} records are censored; raise k_max to at least {hint}")]
    ExcessiveCensoring {
        censored: usize,
        total: usize,
        hint: u64,
    },

    #[error("budget exhausted after {completed} of {requested} units")]
    BudgetExhausted { completed: u64, requested: u64 },

    #[error("config error at `{key}`: {reason}")]
    Config { key: String, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn param(name: &'static str, reason: impl Into<String>) -> Self {
        Error::Parameter {
            name,
            reason: reason.into(),
        }
    }

    pub(crate) fn config(key: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            reason: reason.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
