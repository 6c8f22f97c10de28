use std::io;

use thiserror::Error;

use crate::surgery::NetworkDef;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("index {index} out of range for extent {extent}")]
    Index { index: usize, extent: usize },

    #[error("code {code} does not fit in {bits} bit(s)")]
    CodeOutOfRange { code: u8, bits: u8 },

    #[error("unsupported bit width {0}")]
    UnsupportedBits(u8),

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("distance undefined for a zero vector")]
    ZeroVector,

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("layer {layer}: {msg}")]
    Layer { layer: usize, msg: String },

    #[error("mask error: {0}")]
    Mask(String),

    #[error("covariance matrix is not positive definite")]
    Singular,

    #[error("empty dataset or subset")]
    EmptyDataset,

    #[error("unknown scheme identifier {0:?}")]
    UnknownScheme(String),

    #[error("config: {0}")]
    Config(String),

    #[error("format: {0}")]
    Format(String),

    #[error("pipeline aborted while pruning layer {layer}: {source}")]
    Aborted {
        layer: usize,
        source: Box<Error>,
        checkpoint: Box<NetworkDef>,
    },

    #[error("training diverged at epoch {epoch} (loss is not finite)")]
    Diverged { epoch: usize, last_good: Box<NetworkDef> },

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
