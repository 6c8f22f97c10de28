//! Pruning of quantized neural networks.
//!
//! Filters are ranked by how far their real-valued weights sit from the
//! quantization codebook, either on their own or through the kernels of the
//! next layer that read their output. A Gaussian-process Bayesian optimizer
//! picks a pruning ratio per layer, trading classification error against
//! remaining parameters and bits. A small CPU engine (with an xnor/popcount
//! path for binary layers) evaluates and fine-tunes the pruned networks.

pub mod arch;
pub mod bayesopt;
pub mod data;
pub mod engine;
pub mod error;
pub mod format;
pub mod metrics;
pub mod pipeline;
pub mod quant;
pub mod ranking;
pub mod real;
pub mod surgery;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
