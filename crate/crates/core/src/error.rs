use std::io;
use std::path::PathBuf;

use thiserror::Error;

use crate::space::Knob;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid ladder: {0}")]
    InvalidLadder(String),

    #[error("empty catalog")]
    EmptyCatalog,

    #[error("layer `{layer}`: {reason}")]
    InvalidLayer { layer: String, reason: String },

    #[error("invalid memory policy: {0}")]
    InvalidPolicy(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("dimension mismatch: expected {expected} layers, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("budget of {budget} bytes is below the minimal footprint of {minimum} bytes")]
    BudgetTooSmall { budget: u64, minimum: u64 },

    #[error("layer {layer} knob {knob} is already at its ladder minimum")]
    AtLadderMinimum { layer: usize, knob: Knob },

    #[error("budget unreachable: every variable is at its ladder minimum and memory is still {memory} > {budget}")]
    BudgetUnreachable { memory: u64, budget: u64 },

    #[error("invalid importance profile: {0}")]
    InvalidImportance(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite values in {0}")]
    NonFinite(String),

    #[error("evaluation failed: {0}")]
    Evaluation(String),

    #[error("ledger conflict for config at T={steps}, seed={seed}: stored score {stored}, new score {new}")]
    LedgerConflict {
        steps: u64,
        seed: u64,
        stored: f64,
        new: f64,
    },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("search space too large to enumerate: {count} configurations (limit {limit})")]
    SpaceTooLarge { count: u128, limit: u128 },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error("{context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json {
            context: context.into(),
            source,
        }
    }
}
