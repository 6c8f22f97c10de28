//! xnor/popcount convolution for layers with 1-bit weights and 1-bit inputs.
//!
//! Weight rows and input patches are packed one bit per element (1 ↔ +1).
//! A validity word masks out zero padding, dead input channels and pruned
//! kernels, so the dot product over the remaining positions is
//! `2·popcount(xnor(a, w) & valid) − popcount(valid)`.

use crate::error::{Error, Result};
use crate::quant::{QuantKind, QuantScheme};
use crate::real::Real;
use crate::surgery::Layer;
use crate::tensor::TensorF;

use super::kernels::ConvGeom;

#[derive(Debug, Clone)]
pub(crate) struct BinaryConv {
    k: usize,
    words: usize,
    w_bits: Vec<u64>,
    w_live: Vec<u64>,
    alpha: Option<Vec<f32>>,
}

impl BinaryConv {
    pub fn new(layer: &Layer, weights: &TensorF, scheme: &QuantScheme) -> Result<Self> {
        if !scheme.binary_weights() {
            return Err(Error::UnsupportedBits(scheme.weight_bits));
        }
        let live = layer
            .weight_live_mask()
            .ok_or_else(|| Error::Shape("binary path needs a conv/fc layer".into()))?;
        let k = weights.filters();
        let patch = weights.filter_len();
        let words = patch.div_ceil(64);
        let mut w_bits = vec![0u64; k * words];
        let mut w_live = vec![0u64; k * words];
        let data = weights.data();
        for f in 0..k {
            for e in 0..patch {
                let idx = f * patch + e;
                if live[idx] {
                    w_live[f * words + e / 64] |= 1 << (e % 64);
                    if data[idx] >= 0.0 {
                        w_bits[f * words + e / 64] |= 1 << (e % 64);
                    }
                }
            }
        }
        let alpha = (scheme.kind == QuantKind::XnorNet).then(|| {
            let eff = layer.effective_weights().expect("conv layer");
            (0..k)
                .map(|f| {
                    eff.filter(f)
                        .expect("filter in range")
                        .iter()
                        .fold(0.0f32, |m, v| m.max(v.abs()))
                })
                .collect()
        });
        Ok(Self {
            k,
            words,
            w_bits,
            w_live,
            alpha,
        })
    }

    /// One `C×H×W` sample to `K×(ho·wo)` outputs, before bias and output masks.
    pub fn forward_sample<T: Real>(&self, x: &[T], g: &ConvGeom, y: &mut [T]) {
        let p = g.positions();
        let words = self.words;
        let mut a_bits = vec![0u64; p * words];
        let mut valid = vec![0u64; p * words];
        for c in 0..g.c {
            for i in 0..g.kh {
                for j in 0..g.kw {
                    let e = (c * g.kh + i) * g.kw + j;
                    let (wi, bit) = (e / 64, 1u64 << (e % 64));
                    for oy in 0..g.ho {
                        let iy = (oy * g.stride + i) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let row = &x[(c * g.h + iy as usize) * g.w..(c * g.h + iy as usize + 1) * g.w];
                        for ox in 0..g.wo {
                            let ix = (ox * g.stride + j) as isize - g.pad as isize;
                            if ix < 0 || ix >= g.w as isize {
                                continue;
                            }
                            let pos = (oy * g.wo + ox) * words + wi;
                            valid[pos] |= bit;
                            if row[ix as usize] >= T::zero() {
                                a_bits[pos] |= bit;
                            }
                        }
                    }
                }
            }
        }
        for f in 0..self.k {
            let wb = &self.w_bits[f * words..(f + 1) * words];
            let wl = &self.w_live[f * words..(f + 1) * words];
            let scale = self.alpha.as_ref().map(|a| a[f]);
            for pos in 0..p {
                let ab = &a_bits[pos * words..(pos + 1) * words];
                let va = &valid[pos * words..(pos + 1) * words];
                let (mut matches, mut total) = (0u32, 0u32);
                for t in 0..words {
                    let m = va[t] & wl[t];
                    matches += (!(ab[t] ^ wb[t]) & m).count_ones();
                    total += m.count_ones();
                }
                let dot = 2 * matches as i64 - total as i64;
                y[f * p + pos] = match scale {
                    Some(a) => T::from_f32(a * dot as f32),
                    None => T::from_f32(dot as f32),
                };
            }
        }
    }
}
