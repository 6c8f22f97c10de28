//! Dense real tensors and bit-packed quantized tensors.
//!
//! [`PackedTensor`] stores codes of 1 or 2 bits in little-endian `u64` words,
//! least significant bit first, in row-major element order. The final word is
//! padded with zero codes. This layout is reused verbatim by the model file
//! format.

use crate::error::{Error, Result};

/// Dense row-major `f32` tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorF {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl TensorF {
    /// Builds a tensor, rejecting a shape/length disagreement or non-finite data.
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} holds {n} values, got {}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("TensorF::new"));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn from_fn(shape: Vec<usize>, mut f: impl FnMut(usize) -> f32) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n).map(&mut f).collect();
        Self { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Number of filters (leading extent).
    pub fn filters(&self) -> usize {
        self.shape.first().copied().unwrap_or(0)
    }

    /// Values per filter: product of all extents after the first.
    pub fn filter_len(&self) -> usize {
        self.shape.iter().skip(1).product()
    }

    /// Values per kernel of a 4-D `K×C×h×w` tensor.
    pub fn kernel_len(&self) -> usize {
        self.shape.iter().skip(2).product()
    }

    pub fn filter(&self, k: usize) -> Result<&[f32]> {
        let extent = self.filters();
        if k >= extent {
            return Err(Error::Index { index: k, extent });
        }
        let n = self.filter_len();
        Ok(&self.data[k * n..(k + 1) * n])
    }

    /// The `C·h·w` values of filter `k` as a flat vector.
    pub fn flatten_filter(&self, k: usize) -> Result<Vec<f32>> {
        self.filter(k).map(<[f32]>::to_vec)
    }

    pub fn set_filter(&mut self, k: usize, values: &[f32]) -> Result<()> {
        let extent = self.filters();
        if k >= extent {
            return Err(Error::Index { index: k, extent });
        }
        let n = self.filter_len();
        if values.len() != n {
            return Err(Error::LengthMismatch {
                left: values.len(),
                right: n,
            });
        }
        self.data[k * n..(k + 1) * n].copy_from_slice(values);
        Ok(())
    }

    /// The `h·w` kernel connecting input channel `c` to filter `k`.
    pub fn kernel(&self, k: usize, c: usize) -> Result<&[f32]> {
        if self.shape.len() < 2 {
            return Err(Error::Shape(format!(
                "kernel access needs a rank>=2 tensor, got {:?}",
                self.shape
            )));
        }
        let (kk, cc) = (self.shape[0], self.shape[1]);
        if k >= kk {
            return Err(Error::Index { index: k, extent: kk });
        }
        if c >= cc {
            return Err(Error::Index { index: c, extent: cc });
        }
        let n = self.kernel_len();
        let start = (k * cc + c) * n;
        Ok(&self.data[start..start + n])
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::Shape(format!("cannot reshape {:?} into {shape:?}", self.shape)));
        }
        Ok(Self { shape, data: self.data })
    }

    /// Keeps the listed filters (leading index) and, for rank>=2 tensors,
    /// the listed input channels (second index).
    pub fn gather(&self, filters: &[usize], channels: Option<&[usize]>) -> Result<Self> {
        let k_ext = self.filters();
        for &k in filters {
            if k >= k_ext {
                return Err(Error::Index {
                    index: k,
                    extent: k_ext,
                });
            }
        }
        match channels {
            None => {
                let n = self.filter_len();
                let mut data = Vec::with_capacity(filters.len() * n);
                for &k in filters {
                    data.extend_from_slice(&self.data[k * n..(k + 1) * n]);
                }
                let mut shape = self.shape.clone();
                shape[0] = filters.len();
                Ok(Self { shape, data })
            }
            Some(chans) => {
                if self.shape.len() < 2 {
                    return Err(Error::Shape("channel gather needs rank>=2".into()));
                }
                let c_ext = self.shape[1];
                for &c in chans {
                    if c >= c_ext {
                        return Err(Error::Index {
                            index: c,
                            extent: c_ext,
                        });
                    }
                }
                let kl = self.kernel_len();
                let mut data = Vec::with_capacity(filters.len() * chans.len() * kl);
                for &k in filters {
                    for &c in chans {
                        let s = (k * c_ext + c) * kl;
                        data.extend_from_slice(&self.data[s..s + kl]);
                    }
                }
                let mut shape = self.shape.clone();
                shape[0] = filters.len();
                shape[1] = chans.len();
                Ok(Self { shape, data })
            }
        }
    }
}

/// Bit-packed tensor of 1- or 2-bit codes with optional per-filter scales.
#[derive(Debug, Clone, PartialEq)]
pub struct PackedTensor {
    shape: Vec<usize>,
    len: usize,
    bits_per_code: u8,
    words: Vec<u64>,
    scales: Option<Vec<f32>>,
}

pub(crate) fn word_count(elements: usize, bits: u8) -> usize {
    (elements * bits as usize).div_ceil(64)
}

/// Packs integer codes LSB-first into little-endian 64-bit words.
pub fn pack(codes: &[u8], shape: &[usize], bits_per_code: u8) -> Result<PackedTensor> {
    if bits_per_code != 1 && bits_per_code != 2 {
        return Err(Error::UnsupportedBits(bits_per_code));
    }
    let n: usize = shape.iter().product();
    if n != codes.len() {
        return Err(Error::LengthMismatch {
            left: codes.len(),
            right: n,
        });
    }
    let limit = 1u8 << bits_per_code;
    let bits = bits_per_code as usize;
    let mut words = vec![0u64; word_count(n, bits_per_code)];
    for (i, &code) in codes.iter().enumerate() {
        if code >= limit {
            return Err(Error::CodeOutOfRange {
                code,
                bits: bits_per_code,
            });
        }
        let bit = i * bits;
        words[bit / 64] |= (code as u64) << (bit % 64);
    }
    Ok(PackedTensor {
        shape: shape.to_vec(),
        len: n,
        bits_per_code,
        words,
        scales: None,
    })
}

impl PackedTensor {
    /// Reassembles a tensor from raw parts, checking the layout invariants.
    pub fn from_words(shape: Vec<usize>, bits_per_code: u8, words: Vec<u64>, scales: Option<Vec<f32>>) -> Result<Self> {
        if bits_per_code != 1 && bits_per_code != 2 {
            return Err(Error::UnsupportedBits(bits_per_code));
        }
        let n: usize = shape.iter().product();
        let expected = word_count(n, bits_per_code);
        if words.len() != expected {
            return Err(Error::LengthMismatch {
                left: words.len(),
                right: expected,
            });
        }
        let used = n * bits_per_code as usize;
        if !used.is_multiple_of(64) {
            let tail = words[expected - 1] >> (used % 64);
            if tail != 0 {
                return Err(Error::Format("non-zero padding codes".into()));
            }
        }
        if let Some(s) = &scales {
            if s.len() != shape.first().copied().unwrap_or(0) {
                return Err(Error::LengthMismatch {
                    left: s.len(),
                    right: shape.first().copied().unwrap_or(0),
                });
            }
        }
        Ok(Self {
            shape,
            len: n,
            bits_per_code,
            words,
            scales,
        })
    }

    pub fn with_scales(mut self, scales: Vec<f32>) -> Result<Self> {
        let k = self.shape.first().copied().unwrap_or(0);
        if scales.len() != k {
            return Err(Error::LengthMismatch {
                left: scales.len(),
                right: k,
            });
        }
        self.scales = Some(scales);
        Ok(self)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn bits_per_code(&self) -> u8 {
        self.bits_per_code
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    pub fn scales(&self) -> Option<&[f32]> {
        self.scales.as_deref()
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn code(&self, i: usize) -> u8 {
        let bits = self.bits_per_code as usize;
        let bit = i * bits;
        let mask = (1u64 << bits) - 1;
        ((self.words[bit / 64] >> (bit % 64)) & mask) as u8
    }

    pub fn unpack(&self) -> Vec<u8> {
        (0..self.len()).map(|i| self.code(i)).collect()
    }
}

/// Dot product of two ±1 vectors stored as 1-bit codes (1 ↔ +1, 0 ↔ −1).
///
/// Computed as `2·popcount(xnor(a, b)) − n` over the valid positions only.
#[inline(always)]
pub fn popcount_dot(a: &PackedTensor, b: &PackedTensor) -> Result<i64> {
    if (a.bits_per_code != 1) | (b.bits_per_code != 1) | (a.len != b.len) {
        return Err(dot_operand_error(a, b));
    }
    Ok(xnor_dot_words(&a.words, &b.words, a.len))
}

#[cold]
fn dot_operand_error(a: &PackedTensor, b: &PackedTensor) -> Error {
    if a.bits_per_code != 1 {
        Error::UnsupportedBits(a.bits_per_code)
    } else if b.bits_per_code != 1 {
        Error::UnsupportedBits(b.bits_per_code)
    } else {
        Error::LengthMismatch {
            left: a.len,
            right: b.len,
        }
    }
}

/// `2·popcount(xnor) − n` over the first `n` bit positions of two word slices.
#[inline]
pub(crate) fn xnor_dot_words(a: &[u64], b: &[u64], n: usize) -> i64 {
    if n <= 64 {
        if n == 0 {
            return 0;
        }
        let mask = u64::MAX >> (64 - n);
        return 2 * (!(a[0] ^ b[0]) & mask).count_ones() as i64 - n as i64;
    }
    let full = n / 64;
    let mut matches: u32 = 0;
    for (x, y) in a[..full].iter().zip(&b[..full]) {
        matches += (!(x ^ y)).count_ones();
    }
    let rem = n % 64;
    if rem != 0 {
        let mask = (1u64 << rem) - 1;
        matches += (!(a[full] ^ b[full]) & mask).count_ones();
    }
    2 * matches as i64 - n as i64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flatten_filter_row_major() {
        let t = TensorF::new(vec![2, 1, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(t.flatten_filter(1).unwrap(), vec![3.0, 4.0]);
        assert!(matches!(t.flatten_filter(2), Err(Error::Index { index: 2, extent: 2 })));
    }

    #[test]
    fn flatten_filter_length_of_resnet_stem() {
        let t = TensorF::zeros(vec![64, 3, 7, 7]);
        assert_eq!(t.flatten_filter(0).unwrap().len(), 147);
    }

    #[test]
    fn set_filter_round_trip() {
        let mut t = TensorF::from_fn(vec![3, 2, 2], |i| i as f32);
        let orig = t.clone();
        let f = t.flatten_filter(1).unwrap();
        t.set_filter(1, &f).unwrap();
        assert_eq!(t, orig);
    }

    #[test]
    fn new_rejects_bad_shape_and_nan() {
        assert!(TensorF::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(TensorF::new(vec![1], vec![f32::NAN]).is_err());
    }

    #[test]
    fn pack_all_ones_word() {
        let p = pack(&[1u8; 64], &[64], 1).unwrap();
        assert_eq!(p.words(), &[0xFFFF_FFFF_FFFF_FFFF]);
    }

    #[test]
    fn pack_lsb_first() {
        let p = pack(&[1, 0, 1], &[3], 1).unwrap();
        assert_eq!(p.words(), &[0b101]);
    }

    #[test]
    fn pack_two_bit_layout() {
        let p = pack(&[3, 0, 2, 1], &[4], 2).unwrap();
        assert_eq!(p.words(), &[0b01_10_00_11]);
        assert_eq!(p.unpack(), vec![3, 0, 2, 1]);
    }

    #[test]
    fn pack_rejects_out_of_range_code() {
        assert!(matches!(
            pack(&[0, 2], &[2], 1),
            Err(Error::CodeOutOfRange { code: 2, bits: 1 })
        ));
        assert!(matches!(pack(&[0], &[1], 3), Err(Error::UnsupportedBits(3))));
    }

    #[test]
    fn from_words_rejects_dirty_padding() {
        assert!(PackedTensor::from_words(vec![3], 1, vec![0b1000], None).is_err());
        assert!(PackedTensor::from_words(vec![3], 1, vec![0b101], None).is_ok());
    }

    #[test]
    fn popcount_dot_hand_example() {
        let a = pack(&[1, 0, 1], &[3], 1).unwrap();
        let b = pack(&[1, 1, 0], &[3], 1).unwrap();
        assert_eq!(popcount_dot(&a, &b).unwrap(), -1);
        assert_eq!(popcount_dot(&a, &a).unwrap(), 3);
    }

    #[test]
    fn popcount_dot_length_mismatch() {
        let a = pack(&[1, 0, 1], &[3], 1).unwrap();
        let b = pack(&[1, 1], &[2], 1).unwrap();
        assert!(matches!(popcount_dot(&a, &b), Err(Error::LengthMismatch { .. })));
    }
}
