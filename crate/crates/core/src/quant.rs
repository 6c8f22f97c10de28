//! Pointwise quantizers for weights and activations.
//!
//! Weight codebooks:
//! * 1-bit schemes map `w` to `sign(w)` with `sign(0) = +1`; Xnor-Net also
//!   carries a per-filter scale `α_k = mean(|w_k|)`.
//! * 2-bit DoReFa maps `w` to `2·q(tanh(w) / (2·max|tanh(w)|) + ½) − 1` where
//!   `q(x) = round(3x) / 3`, giving levels `{−1, −⅓, ⅓, 1}`. The maximum is
//!   taken over the whole layer.
//!
//! Rounding is half-to-even throughout.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::{pack, PackedTensor, TensorF};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum QuantKind {
    BinaryConnect,
    Bnn,
    XnorNet,
    DoReFa,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct QuantScheme {
    pub kind: QuantKind,
    pub weight_bits: u8,
    /// 32 means full-precision activations.
    pub act_bits: u8,
    /// First and last layers are quantized as well.
    pub fully_binarized: bool,
}

impl QuantScheme {
    pub const fn binary_connect() -> Self {
        Self {
            kind: QuantKind::BinaryConnect,
            weight_bits: 1,
            act_bits: 32,
            fully_binarized: false,
        }
    }

    pub const fn bnn() -> Self {
        Self {
            kind: QuantKind::Bnn,
            weight_bits: 1,
            act_bits: 1,
            fully_binarized: false,
        }
    }

    pub const fn bnn_fully() -> Self {
        Self {
            fully_binarized: true,
            ..Self::bnn()
        }
    }

    pub const fn xnor() -> Self {
        Self {
            kind: QuantKind::XnorNet,
            weight_bits: 1,
            act_bits: 1,
            fully_binarized: false,
        }
    }

    pub const fn dorefa2() -> Self {
        Self {
            kind: QuantKind::DoReFa,
            weight_bits: 2,
            act_bits: 2,
            fully_binarized: false,
        }
    }

    pub fn id(&self) -> &'static str {
        match (self.kind, self.fully_binarized) {
            (QuantKind::BinaryConnect, _) => "binaryconnect",
            (QuantKind::Bnn, false) => "bnn",
            (QuantKind::Bnn, true) => "bnn-fully",
            (QuantKind::XnorNet, _) => "xnor",
            (QuantKind::DoReFa, _) => "dorefa2",
        }
    }

    /// Checks the bit-width combination allowed for each kind.
    pub fn validate(&self) -> Result<()> {
        let ok = match self.kind {
            QuantKind::BinaryConnect => self.weight_bits == 1 && self.act_bits == 32,
            QuantKind::Bnn | QuantKind::XnorNet => self.weight_bits == 1 && self.act_bits == 1,
            QuantKind::DoReFa => self.weight_bits == 2 && self.act_bits == 2,
        };
        if ok {
            Ok(())
        } else if !matches!(self.weight_bits, 1 | 2) {
            Err(Error::UnsupportedBits(self.weight_bits))
        } else {
            Err(Error::UnsupportedBits(self.act_bits))
        }
    }

    pub fn binary_weights(&self) -> bool {
        self.weight_bits == 1
    }

    pub fn binary_activations(&self) -> bool {
        self.act_bits == 1
    }

    pub fn quantizes_activations(&self) -> bool {
        self.act_bits < 32
    }
}

impl fmt::Display for QuantScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for QuantScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "binaryconnect" => Ok(Self::binary_connect()),
            "bnn" => Ok(Self::bnn()),
            "bnn-fully" => Ok(Self::bnn_fully()),
            "xnor" => Ok(Self::xnor()),
            "dorefa2" => Ok(Self::dorefa2()),
            other => Err(Error::UnknownScheme(other.to_string())),
        }
    }
}

pub const DOREFA2_WEIGHT_LEVELS: [f32; 4] = [-1.0, -1.0 / 3.0, 1.0 / 3.0, 1.0];

#[inline]
pub fn sign<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one()
    } else {
        -T::one()
    }
}

/// `round((2^k − 1)·x) / (2^k − 1)` with ties to even.
#[inline]
pub fn quantize_k(x: f32, k: u8) -> f32 {
    let n = ((1u32 << k) - 1) as f32;
    (x * n).round_ties_even() / n
}

#[inline]
fn dorefa_index(x: f32) -> u8 {
    (x.clamp(0.0, 1.0) * 3.0).round_ties_even() as u8
}

fn dorefa_tanh_max(w: &[f32], live: Option<&[bool]>) -> f32 {
    w.iter()
        .enumerate()
        .filter(|(i, _)| live.is_none_or(|l| l[*i]))
        .map(|(_, v)| v.tanh().abs())
        .fold(0.0f32, f32::max)
}

#[inline]
fn dorefa_code(w: f32, tanh_max: f32) -> u8 {
    let t = if tanh_max > 0.0 {
        w.tanh() / (2.0 * tanh_max)
    } else {
        0.0
    };
    dorefa_index(t + 0.5)
}

/// Mean absolute value of each filter over its live entries.
fn xnor_scales(w: &TensorF, live: Option<&[bool]>) -> Vec<f32> {
    let n = w.filter_len();
    (0..w.filters())
        .map(|k| {
            let vals = &w.data()[k * n..(k + 1) * n];
            let (mut sum, mut count) = (0.0f64, 0usize);
            for (i, v) in vals.iter().enumerate() {
                if live.is_none_or(|l| l[k * n + i]) {
                    sum += v.abs() as f64;
                    count += 1;
                }
            }
            if count == 0 {
                // A fully masked filter keeps the scale of its raw weights so
                // stored codes stay faithful; it never reaches the output.
                (vals.iter().map(|v| v.abs() as f64).sum::<f64>() / n.max(1) as f64) as f32
            } else {
                (sum / count as f64) as f32
            }
        })
        .collect()
}

/// Quantizes a weight tensor into packed codes (plus Xnor-Net scales).
pub fn quantize_weights(w: &TensorF, scheme: &QuantScheme) -> Result<PackedTensor> {
    quantize_weights_live(w, scheme, None)
}

/// Like [`quantize_weights`], with the Xnor scales and the DoReFa maximum
/// taken over the `live` entries only. Every entry still gets a code.
pub fn quantize_weights_live(w: &TensorF, scheme: &QuantScheme, live: Option<&[bool]>) -> Result<PackedTensor> {
    scheme.validate()?;
    match scheme.weight_bits {
        1 => {
            let codes: Vec<u8> = w.data().iter().map(|&v| u8::from(v >= 0.0)).collect();
            let packed = pack(&codes, w.shape(), 1)?;
            if scheme.kind == QuantKind::XnorNet {
                packed.with_scales(xnor_scales(w, live))
            } else {
                Ok(packed)
            }
        }
        2 => {
            let m = dorefa_tanh_max(w.data(), live);
            let codes: Vec<u8> = w.data().iter().map(|&v| dorefa_code(v, m)).collect();
            pack(&codes, w.shape(), 2)
        }
        b => Err(Error::UnsupportedBits(b)),
    }
}

/// Maps packed codes back to real codebook values.
pub fn dequantize(p: &PackedTensor) -> TensorF {
    let shape = p.shape().to_vec();
    let per_filter: usize = shape.iter().skip(1).product();
    match p.bits_per_code() {
        1 => TensorF::from_fn(shape, |i| {
            let s = if p.code(i) == 1 { 1.0 } else { -1.0 };
            match p.scales() {
                Some(a) => a[i / per_filter.max(1)] * s,
                None => s,
            }
        }),
        _ => TensorF::from_fn(shape, |i| DOREFA2_WEIGHT_LEVELS[p.code(i) as usize]),
    }
}

/// Real-valued image θ(w) of a weight tensor. Entries whose `live` flag is
/// false are excluded from the layer statistics (Xnor scale, DoReFa maximum)
/// and come out as zero.
pub fn quantize_weights_real(w: &TensorF, scheme: &QuantScheme, live: Option<&[bool]>) -> TensorF {
    let n = w.filter_len().max(1);
    let data = w.data();
    let mut out = vec![0.0f32; data.len()];
    match scheme.weight_bits {
        1 => {
            let scales = (scheme.kind == QuantKind::XnorNet).then(|| xnor_scales(w, live));
            for (i, o) in out.iter_mut().enumerate() {
                if live.is_some_and(|l| !l[i]) {
                    continue;
                }
                let s = sign(data[i]);
                *o = match &scales {
                    Some(a) => a[i / n] * s,
                    None => s,
                };
            }
        }
        _ => {
            let m = dorefa_tanh_max(data, live);
            for (i, o) in out.iter_mut().enumerate() {
                if live.is_some_and(|l| !l[i]) {
                    continue;
                }
                *o = DOREFA2_WEIGHT_LEVELS[dorefa_code(data[i], m) as usize];
            }
        }
    }
    TensorF::new(w.shape().to_vec(), out).expect("quantized values are finite")
}

/// Straight-through gradient from θ(w) back to the shadow weights `w`.
///
/// Sign-based schemes pass the gradient where `|w| ≤ 1` (scaled by `α_k` for
/// Xnor-Net, treated as a constant). DoReFa passes it through the tanh
/// normalisation: `(1 − tanh²(w)) / max|tanh(w)|`.
pub fn weight_ste(grad_q: &[f32], w: &TensorF, scheme: &QuantScheme, live: Option<&[bool]>) -> Vec<f32> {
    let data = w.data();
    let n = w.filter_len().max(1);
    let mut out = vec![0.0f32; data.len()];
    match scheme.weight_bits {
        1 => {
            let scales = (scheme.kind == QuantKind::XnorNet).then(|| xnor_scales(w, live));
            for (i, o) in out.iter_mut().enumerate() {
                if live.is_some_and(|l| !l[i]) || data[i].abs() > 1.0 {
                    continue;
                }
                *o = match &scales {
                    Some(a) => grad_q[i] * a[i / n],
                    None => grad_q[i],
                };
            }
        }
        _ => {
            let m = dorefa_tanh_max(data, live);
            if m > 0.0 {
                for (i, o) in out.iter_mut().enumerate() {
                    if live.is_some_and(|l| !l[i]) {
                        continue;
                    }
                    let t = data[i].tanh();
                    *o = grad_q[i] * (1.0 - t * t) / m;
                }
            }
        }
    }
    out
}

/// Quantized value of one activation.
#[inline]
pub fn quantize_activation<T: Real>(x: T, scheme: &QuantScheme) -> T {
    match scheme.act_bits {
        1 => sign(x),
        2 => {
            let c = x.max(T::zero()).min(T::one());
            let three = T::from_f32(3.0);
            let scaled = c * three;
            let two = T::from_f32(2.0);
            let r = if scaled - scaled.trunc() == T::from_f32(0.5) {
                (scaled / two).round() * two
            } else {
                scaled.round()
            };
            r / three
        }
        _ => x,
    }
}

/// Whether the straight-through estimator passes the gradient at `x`.
#[inline]
pub fn activation_ste_pass<T: Real>(x: T, scheme: &QuantScheme) -> bool {
    match scheme.act_bits {
        1 => x.abs() <= T::one(),
        2 => x >= T::zero() && x <= T::one(),
        _ => true,
    }
}

pub fn quantize_activations(a: &TensorF, scheme: &QuantScheme) -> TensorF {
    TensorF::from_fn(a.shape().to_vec(), |i| quantize_activation(a.data()[i], scheme))
}

/// Packs binary activations as 1-bit codes (1 ↔ +1).
pub fn pack_activations(a: &TensorF, scheme: &QuantScheme) -> Result<PackedTensor> {
    if !scheme.binary_activations() {
        return Err(Error::UnsupportedBits(scheme.act_bits));
    }
    let codes: Vec<u8> = a.data().iter().map(|&v| u8::from(v >= 0.0)).collect();
    pack(&codes, a.shape(), 1)
}

/// Straight-through backward pass of the activation quantizer.
pub fn ste_backward(grad_out: &TensorF, pre_quant: &TensorF, scheme: &QuantScheme) -> Result<TensorF> {
    if grad_out.shape() != pre_quant.shape() {
        return Err(Error::Shape(format!(
            "gradient {:?} vs input {:?}",
            grad_out.shape(),
            pre_quant.shape()
        )));
    }
    let g = grad_out.data();
    let x = pre_quant.data();
    Ok(TensorF::from_fn(grad_out.shape().to_vec(), |i| {
        if activation_ste_pass(x[i], scheme) {
            g[i]
        } else {
            0.0
        }
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f32]) -> TensorF {
        TensorF::new(vec![1, v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn scheme_ids_round_trip() {
        for id in ["binaryconnect", "bnn", "bnn-fully", "xnor", "dorefa2"] {
            let s: QuantScheme = id.parse().unwrap();
            assert_eq!(s.id(), id);
            s.validate().unwrap();
        }
        assert!("ternary".parse::<QuantScheme>().is_err());
    }

    #[test]
    fn invalid_bit_width_is_rejected() {
        let s = QuantScheme {
            weight_bits: 3,
            ..QuantScheme::bnn()
        };
        assert!(matches!(
            quantize_weights(&t(&[1.0]), &s),
            Err(Error::UnsupportedBits(3))
        ));
    }

    #[test]
    fn bnn_weight_signs() {
        let w = t(&[0.3, -0.4, 1.2, -0.1]);
        let p = quantize_weights(&w, &QuantScheme::bnn()).unwrap();
        assert_eq!(dequantize(&p).data(), &[1.0, -1.0, 1.0, -1.0]);
        assert!(p.scales().is_none());
    }

    #[test]
    fn xnor_scale_is_mean_abs() {
        let w = t(&[0.3, -0.4, 1.2, -0.1]);
        let p = quantize_weights(&w, &QuantScheme::xnor()).unwrap();
        assert_eq!(p.unpack(), vec![1, 0, 1, 0]);
        assert!((p.scales().unwrap()[0] - 0.5).abs() < 1e-7);
    }

    #[test]
    fn sign_of_zero_is_plus_one() {
        let p = quantize_weights(&t(&[0.0, -0.0]), &QuantScheme::bnn()).unwrap();
        assert_eq!(dequantize(&p).data(), &[1.0, 1.0]);
    }

    #[test]
    fn binary_fixed_point() {
        let w = t(&[1.0, -1.0, -1.0, 1.0]);
        let q = quantize_weights_real(&w, &QuantScheme::bnn(), None);
        assert_eq!(q, w);
    }

    #[test]
    fn dorefa_levels_and_idempotence() {
        let w = t(&[-2.0, -0.2, 0.05, 0.7, 3.0, 0.0]);
        let q = quantize_weights_real(&w, &QuantScheme::dorefa2(), None);
        for v in q.data() {
            assert!(DOREFA2_WEIGHT_LEVELS.contains(v), "{v}");
        }
        let again = quantize_weights_real(&q, &QuantScheme::dorefa2(), None);
        assert_eq!(again, q);
        let p = quantize_weights(&w, &QuantScheme::dorefa2()).unwrap();
        assert_eq!(dequantize(&p), q);
    }

    #[test]
    fn dorefa_activation_half_rounds_to_even() {
        assert!((quantize_activation(0.5f32, &QuantScheme::dorefa2()) - 2.0 / 3.0).abs() < 1e-7);
        assert!((quantize_activation(0.5f64, &QuantScheme::dorefa2()) - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(quantize_activation(1.7f32, &QuantScheme::dorefa2()), 1.0);
        assert_eq!(quantize_activation(-0.3f32, &QuantScheme::dorefa2()), 0.0);
        assert_eq!(quantize_k(0.5, 2), 2.0 / 3.0);
        // 3·(1/6) = 0.5 rounds to 0
        assert_eq!(quantize_activation(1.0f64 / 6.0, &QuantScheme::dorefa2()), 0.0);
    }

    #[test]
    fn activation_quantizers() {
        let a = t(&[0.2, -0.7]);
        assert_eq!(quantize_activations(&a, &QuantScheme::bnn()).data(), &[1.0, -1.0]);
        assert_eq!(quantize_activations(&a, &QuantScheme::binary_connect()), a);
    }

    #[test]
    fn ste_clip_region() {
        let s = QuantScheme::bnn();
        let g = ste_backward(&t(&[2.0, 2.0]), &t(&[0.5, 1.5]), &s).unwrap();
        assert_eq!(g.data(), &[2.0, 0.0]);
        assert!(ste_backward(&t(&[1.0]), &t(&[1.0, 2.0]), &s).is_err());
    }

    #[test]
    fn masked_statistics_ignore_dead_entries() {
        let w = TensorF::new(vec![1, 4], vec![1.0, -3.0, 0.5, 100.0]).unwrap();
        let live = [true, true, true, false];
        let q = quantize_weights_real(&w, &QuantScheme::xnor(), Some(&live));
        let a = (1.0 + 3.0 + 0.5) / 3.0;
        assert_eq!(q.data(), &[a, -a, a, 0.0]);
    }
}
