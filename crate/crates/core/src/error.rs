//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{context}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        context: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("backward called on a consumed tape")]
    TapeConsumed,

    #[error("backward requires a scalar loss node, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    #[error("window at tick {tick} needs {needed} ticks of history")]
    InsufficientHistory { tick: usize, needed: usize },

    #[error("position projects beyond the terrain ends")]
    PositionOutOfRange,

    #[error("terrain generation failed: {0}")]
    TerrainGeneration(String),

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("checkpoint role mismatch: expected {expected}, found {found}")]
    RoleMismatch { expected: String, found: String },

    #[error("need at least {needed} records, got {got}")]
    TooFewRecords { needed: usize, got: usize },

    #[error("correlation undefined: zero variance in input")]
    ZeroVariance,

    #[error("bad file format: {0}")]
    Format(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
