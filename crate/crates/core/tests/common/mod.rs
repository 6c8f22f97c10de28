//! Shared fixtures and naive oracles for the integration tests.
#![allow(dead_code)]

use qprune::arch::{desk_cnn, DeskCnnConfig};
use qprune::data::{synth_images, DataSplit, Dataset, Normalization};
use qprune::quant::QuantScheme;
use qprune::surgery::{LayerKind, NetworkDef};
use qprune::tensor::TensorF;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(shape: Vec<usize>, rng: &mut ChaCha8Rng, scale: f32) -> TensorF {
    TensorF::from_fn(shape, |_| rng.gen_range(-scale..scale))
}

/// Replaces every parameter and batch-norm statistic with random values.
pub fn randomize(net: &mut NetworkDef, seed: u64) {
    let mut r = rng(seed);
    for layer in &mut net.layers {
        match &mut layer.kind {
            LayerKind::Conv(c) | LayerKind::Fc(c) => {
                for w in c.weights.data_mut() {
                    *w = r.gen_range(-1.0..1.0);
                }
                if let Some(b) = &mut c.bias {
                    for v in b {
                        *v = r.gen_range(-0.5..0.5);
                    }
                }
            }
            LayerKind::BatchNorm(bn) => {
                for i in 0..bn.gamma.len() {
                    bn.gamma[i] = r.gen_range(0.5..1.5);
                    bn.beta[i] = r.gen_range(-0.5..0.5);
                    bn.mean[i] = r.gen_range(-1.0..1.0);
                    bn.var[i] = r.gen_range(0.5..4.0);
                }
            }
            LayerKind::PRelu(s) => {
                for v in s {
                    *v = r.gen_range(0.0..0.5);
                }
            }
            _ => {}
        }
    }
}

pub fn desk(scheme: QuantScheme, residual: bool, seed: u64) -> NetworkDef {
    let cfg = DeskCnnConfig {
        scheme,
        residual,
        ..DeskCnnConfig::default()
    };
    desk_cnn(&cfg, seed).expect("desk net builds")
}

pub fn layer_index(net: &NetworkDef, name: &str) -> usize {
    net.layers
        .iter()
        .position(|l| l.name == name)
        .unwrap_or_else(|| panic!("no layer {name}"))
}

pub fn synth_split(train: usize, val: usize, seed: u64) -> DataSplit {
    let norm = Normalization::default();
    DataSplit {
        train: Dataset::from_raw(&synth_images(train, seed), &norm).unwrap(),
        val: Dataset::from_raw(&synth_images(val, seed + 1_000_000), &norm).unwrap(),
    }
}

/// Direct convolution: batch, output channel, output row, output column,
/// input channel, kernel row, kernel column.
pub fn naive_conv(
    input: &[f64],
    [n, c, h, w]: [usize; 4],
    weights: &[f64],
    [k, kh, kw]: [usize; 3],
    bias: Option<&[f64]>,
    stride: usize,
    pad: usize,
) -> (Vec<f64>, [usize; 4]) {
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * k * oh * ow];
    for b in 0..n {
        for o in 0..k {
            for y in 0..oh {
                for x in 0..ow {
                    let mut acc = bias.map_or(0.0, |bb| bb[o]);
                    for ch in 0..c {
                        for i in 0..kh {
                            for j in 0..kw {
                                let iy = (y * stride + i) as isize - pad as isize;
                                let ix = (x * stride + j) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                let v = input[((b * c + ch) * h + iy as usize) * w + ix as usize];
                                acc += v * weights[((o * c + ch) * kh + i) * kw + j];
                            }
                        }
                    }
                    out[((b * k + o) * oh + y) * ow + x] = acc;
                }
            }
        }
    }
    (out, [n, k, oh, ow])
}

pub fn sign(x: f32) -> f32 {
    if x >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

/// Quantized image of a `K×C×h×w` tensor for sign-based schemes, computed
/// element by element. Xnor-Net scales each filter by its mean `|w|`.
pub fn naive_binary_image(w: &TensorF, xnor: bool) -> Vec<f32> {
    let per = w.filter_len();
    let mut out = Vec::with_capacity(w.len());
    for k in 0..w.filters() {
        let f = &w.data()[k * per..(k + 1) * per];
        let mut total = 0.0f64;
        for v in f {
            total += v.abs() as f64;
        }
        let alpha = (total / per as f64) as f32;
        for &v in f {
            out.push(if xnor { alpha * sign(v) } else { sign(v) });
        }
    }
    out
}

/// Angle between two vectors: arccos of the clamped cosine.
pub fn naive_angle(v: &[f64], q: &[f64]) -> f64 {
    let mut dot = 0.0;
    let mut a = 0.0;
    let mut b = 0.0;
    for i in 0..v.len() {
        dot += v[i] * q[i];
        a += v[i] * v[i];
        b += q[i] * q[i];
    }
    (dot / (a.sqrt() * b.sqrt())).clamp(-1.0, 1.0).acos()
}

pub fn naive_euclid(v: &[f64], q: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..v.len() {
        s += (v[i] - q[i]) * (v[i] - q[i]);
    }
    s.sqrt()
}

pub fn max_abs_diff(a: &[f32], b: &[f32]) -> f32 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
}
