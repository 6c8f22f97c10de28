//! CPU inference and gradients for [`NetworkDef`] graphs.
//!
//! Convolutions run as im2col + GEMM on the effective (quantized, masked)
//! weights. Layers whose weights and inputs are both 1-bit can instead run on
//! packed bits with xnor/popcount; both paths give identical results up to the
//! float rounding of the Xnor-Net scale.

mod binary;
pub mod graph;
pub mod kernels;

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use crate::data::Batch;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::surgery::{Layer, NetworkDef, Precision, Source};
use crate::tensor::TensorF;
pub use graph::{
    backward, forward, softmax_cross_entropy, BnBatchStats, ForwardCache, LayerGrads, Mode, ParamKind, PreparedNet,
};

/// Samples per forward call during evaluation.
pub const EVAL_CHUNK: usize = 250;

fn split_batch_shape(input: &TensorF) -> Result<(usize, [usize; 3])> {
    match *input.shape() {
        [n, c, h, w] => Ok((n, [c, h, w])),
        [c, h, w] => Ok((1, [c, h, w])),
        _ => Err(Error::Shape(format!("expected N×C×H×W input, got {:?}", input.shape()))),
    }
}

/// Accepts an input whose channel extent is either the layer's full input
/// extent or its live input count; the latter is scattered into the live
/// channels.
fn align_channels(input: &TensorF, layer: &Layer) -> Result<(usize, [usize; 3], Vec<f32>)> {
    let (n, [c, h, w]) = split_batch_shape(input)?;
    let full = layer.in_mask.len();
    if c == full {
        return Ok((n, [c, h, w], input.data().to_vec()));
    }
    let live = layer.live_inputs();
    if c != live.len() {
        return Err(Error::Shape(format!(
            "input has {c} channel(s); layer expects {full} or {} live",
            live.len()
        )));
    }
    let hw = h * w;
    let mut data = vec![0.0f32; n * full * hw];
    for s in 0..n {
        for (src, &dst) in live.iter().enumerate() {
            data[(s * full + dst) * hw..(s * full + dst + 1) * hw]
                .copy_from_slice(&input.data()[(s * c + src) * hw..(s * c + src + 1) * hw]);
        }
    }
    Ok((n, [full, h, w], data))
}

fn run_single(layer: Layer, input: &TensorF, fast: bool) -> Result<TensorF> {
    if layer.kind.conv().is_none() {
        return Err(Error::Shape(format!("layer '{}' is not conv/fc", layer.name)));
    }
    let (n, shape, data) = align_channels(input, &layer)?;
    let mut net = NetworkDef::new(shape);
    let mut layer = layer;
    layer.inputs = vec![Source::Input];
    net.layers.push(layer);
    let out_shape = net.output_shapes()?[0];
    let prepared = PreparedNet::<f32>::new(&net, fast)?;
    let cache = forward(&prepared, &data, n, Mode::Eval)?;
    let mut shape = vec![n];
    shape.extend_from_slice(&out_shape);
    TensorF::new(shape, cache.outputs.into_iter().next().expect("one layer"))
}

/// Convolution of an `N×C×H×W` (or `C×H×W`) input with one conv/fc layer,
/// honouring its masks, quantizers, stride and padding. Dead filters output
/// zero maps.
pub fn conv_forward(input: &TensorF, layer: &Layer) -> Result<TensorF> {
    run_single(layer.clone(), input, false)
}

/// The same convolution computed on packed bits. Inputs are binarized with
/// `sign` (so ±1 codes pass through unchanged). Fails unless the layer's
/// weights and activations are both 1-bit.
pub fn binary_conv_forward(input: &TensorF, layer: &Layer) -> Result<TensorF> {
    let conv = layer
        .kind
        .conv()
        .ok_or_else(|| Error::Shape(format!("layer '{}' is not conv/fc", layer.name)))?;
    let scheme = match conv.precision.scheme() {
        Some(s) if s.binary_weights() && s.binary_activations() => *s,
        Some(s) => return Err(Error::UnsupportedBits(s.weight_bits.max(s.act_bits))),
        None => return Err(Error::UnsupportedBits(32)),
    };
    let mut layer = layer.clone();
    layer.kind.conv_mut().expect("conv").precision = Precision::Quantized {
        scheme,
        quantize_input: true,
    };
    run_single(layer, input, true)
}

/// Logits `N×classes` of a batch. `binary_fast_path` selects xnor/popcount
/// for fully binary layers.
pub fn forward_logits(net: &NetworkDef, inputs: &TensorF, binary_fast_path: bool) -> Result<TensorF> {
    let prepared = PreparedNet::<f32>::new(net, binary_fast_path)?;
    let (n, shape) = split_batch_shape(inputs)?;
    if shape != net.input_shape {
        return Err(Error::Shape(format!(
            "input samples are {shape:?}, network expects {:?}",
            net.input_shape
        )));
    }
    let cache = forward(&prepared, inputs.data(), n, Mode::Eval)?;
    let classes = prepared.num_classes();
    TensorF::new(vec![n, classes], cache.logits(&prepared).to_vec())
}

/// Wall-clock timings of repeated full passes, in seconds.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LatencyStats {
    pub passes: usize,
    pub mean_s: f64,
    pub median_s: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    pub top1_error_pct: f64,
    /// Mean cross-entropy.
    pub loss: f64,
    pub latency: LatencyStats,
}

impl EvalResult {
    pub fn accuracy_pct(&self) -> f64 {
        100.0 - self.top1_error_pct
    }
}

/// Index of the largest value; exact ties are broken uniformly at random.
fn argmax_tiebreak(row: &[f32], rng: &mut ChaCha8Rng) -> usize {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let tied: Vec<usize> = (0..row.len()).filter(|&j| row[j] == max).collect();
    if tied.len() == 1 {
        tied[0]
    } else {
        tied[rng.gen_range(0..tied.len())]
    }
}

fn all_logits(prepared: &PreparedNet<f32>, data: &Dataset) -> Result<Vec<f32>> {
    let sl = data.sample_len();
    let mut logits = Vec::with_capacity(data.len() * prepared.num_classes());
    for start in (0..data.len()).step_by(EVAL_CHUNK) {
        let end = (start + EVAL_CHUNK).min(data.len());
        let cache = forward(prepared, &data.inputs[start * sl..end * sl], end - start, Mode::Eval)?;
        logits.extend_from_slice(cache.logits(prepared));
    }
    Ok(logits)
}

/// Top-1 error, mean cross-entropy and the latency of `passes` timed full
/// passes over `data` (none when `passes == 0`). Deterministic given `seed`.
pub fn evaluate(net: &NetworkDef, data: &Dataset, passes: usize, seed: u64) -> Result<EvalResult> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if data.sample_shape != net.input_shape {
        return Err(Error::Shape(format!(
            "dataset samples are {:?}, network expects {:?}",
            data.sample_shape, net.input_shape
        )));
    }
    let prepared = PreparedNet::<f32>::new(net, true)?;
    let classes = prepared.num_classes();
    if let Some(&bad) = data.labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Index {
            index: bad,
            extent: classes,
        });
    }
    let logits = all_logits(&prepared, data)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let wrong = logits
        .chunks_exact(classes)
        .zip(&data.labels)
        .filter(|(row, &l)| argmax_tiebreak(row, &mut rng) != l)
        .count();
    let (loss, _) = softmax_cross_entropy(&logits, &data.labels, classes);

    let mut times = Vec::with_capacity(passes);
    for _ in 0..passes {
        let t0 = Instant::now();
        std::hint::black_box(all_logits(&prepared, data)?);
        times.push(t0.elapsed().as_secs_f64());
    }
    let latency = if times.is_empty() {
        LatencyStats::default()
    } else {
        let mean_s = times.iter().sum::<f64>() / times.len() as f64;
        times.sort_by(f64::total_cmp);
        let m = times.len() / 2;
        let median_s = if times.len() % 2 == 1 {
            times[m]
        } else {
            0.5 * (times[m - 1] + times[m])
        };
        LatencyStats {
            passes,
            mean_s,
            median_s,
        }
    };
    Ok(EvalResult {
        top1_error_pct: 100.0 * wrong as f64 / data.len() as f64,
        loss: loss as f64,
        latency,
    })
}
