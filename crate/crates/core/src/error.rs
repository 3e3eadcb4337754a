use thiserror::Error;

/// Errors produced by the quantized training engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite input value at index {index}")]
    NonFinite { index: usize },

    #[error("invalid scale {0}: scales must be positive and finite")]
    InvalidScale(f64),

    #[error("unsupported bit-width {0} (expected 8 or 32)")]
    UnsupportedBitWidth(u32),

    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch { expected: Vec<usize>, got: Vec<usize> },

    #[error("scale mismatch: layer expects input scale {expected}, got {got}")]
    ScaleMismatch { expected: f64, got: f64 },

    #[error("32-bit accumulator overflow in layer {layer} (value {value})")]
    AccumulatorOverflow { layer: usize, value: i128 },

    #[error("xorshift seed must be nonzero")]
    ZeroSeed,

    #[error("empty batch")]
    EmptyBatch,

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("layer {0} has no pre-activation to perturb")]
    NoPreActivation(usize),

    #[error("invalid block id {block} (model has {blocks} blocks)")]
    InvalidBlock { block: usize, blocks: usize },

    #[error("{0}")]
    InvalidArgument(String),

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
