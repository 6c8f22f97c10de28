//! `QPRN` model files and the `QPRS` shadow-weight sidecar.
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! "QPRN" u16 version u32 layers u32 C u32 H u32 W
//! per layer:
//!   u8 kind  (0 conv, 1 fc, 2 bn, 3 prelu, 4 residual_add, 5 pool, 6 softmax)
//!   u16 name length, name bytes (UTF-8)
//!   u8 input count, u32 per input (0 = network input, i + 1 = layer i)
//!   extents:
//!     conv/fc: u32 K, C, kh, kw, stride, padding
//!     bn/prelu: u32 C
//!     pool: u8 kind (0 max, 1 avg, 2 global avg), u32 size, u32 stride
//!   u8 scheme length, scheme id ("fp32" for full precision)
//!   u8 flags (bit 0 quantize input, bit 1 has bias)
//!   masks as 1-bit packed tensors: out, in, and for conv/fc the K·C kernel mask
//!   conv/fc payload: packed codes with optional scales (quantized) or K·C·kh·kw f32
//!   auxiliaries: bias (K f32), bn γ, β, μ, σ² (4·C f32) then eps, prelu slopes
//! packed tensor: u8 bits, u8 rank, u32 extents, ⌈n·bits/64⌉ u64 words,
//!   u8 has-scales, [u32 count, f32 scales]
//! ```
//!
//! Quantized layers store only their codes. Loading one gives weights equal
//! to the dequantized codes, which re-quantize to the same codes. The sidecar
//! keeps the full-precision shadow weights needed to resume training.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::quant::{dequantize, quantize_weights_live, QuantScheme};
use crate::surgery::{BatchNorm, ConvLayer, Layer, LayerKind, NetworkDef, PoolKind, Precision, Source};
use crate::tensor::{pack, PackedTensor, TensorF};

pub const MODEL_MAGIC: &[u8; 4] = b"QPRN";
pub const SHADOW_MAGIC: &[u8; 4] = b"QPRS";
pub const VERSION: u16 = 1;

#[derive(Default)]
struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: usize) {
        self.buf.extend_from_slice(&(v as u32).to_le_bytes());
    }
    fn f32s(&mut self, v: &[f32]) {
        for x in v {
            self.buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    fn bytes(&mut self, v: &[u8]) {
        self.buf.extend_from_slice(v);
    }
    fn packed(&mut self, p: &PackedTensor) {
        self.u8(p.bits_per_code());
        self.u8(p.shape().len() as u8);
        for &d in p.shape() {
            self.u32(d);
        }
        for w in p.words() {
            self.buf.extend_from_slice(&w.to_le_bytes());
        }
        match p.scales() {
            Some(s) => {
                self.u8(1);
                self.u32(s.len());
                self.f32s(s);
            }
            None => self.u8(0),
        }
    }
    fn mask(&mut self, m: &[bool]) -> Result<()> {
        let codes: Vec<u8> = m.iter().map(|&b| b as u8).collect();
        self.packed(&pack(&codes, &[m.len()], 1)?);
        Ok(())
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format(format!("truncated file at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(
            n.checked_mul(4)
                .ok_or_else(|| Error::Format("length overflow".into()))?,
        )?;
        Ok(raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect())
    }
    fn packed(&mut self) -> Result<PackedTensor> {
        let bits = self.u8()?;
        if bits != 1 && bits != 2 {
            return Err(Error::UnsupportedBits(bits));
        }
        let rank = self.u8()? as usize;
        let shape = (0..rank).map(|_| self.u32()).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let words = (0..(n * bits as usize).div_ceil(64))
            .map(|_| self.u64())
            .collect::<Result<Vec<_>>>()?;
        let scales = if self.u8()? == 1 {
            let count = self.u32()?;
            Some(self.f32s(count)?)
        } else {
            None
        };
        PackedTensor::from_words(shape, bits, words, scales)
    }
    /// A mask of `expected` entries, or of any length when `None`.
    fn mask(&mut self, expected: Option<usize>) -> Result<Vec<bool>> {
        let p = self.packed()?;
        if p.bits_per_code() != 1 || p.shape().len() != 1 || expected.is_some_and(|e| e != p.len()) {
            return Err(Error::Format(format!("malformed mask of {} entries", p.len())));
        }
        Ok(p.unpack().into_iter().map(|c| c == 1).collect())
    }
}

fn kind_tag(kind: &LayerKind) -> u8 {
    match kind {
        LayerKind::Conv(_) => 0,
        LayerKind::Fc(_) => 1,
        LayerKind::BatchNorm(_) => 2,
        LayerKind::PRelu(_) => 3,
        LayerKind::ResidualAdd => 4,
        LayerKind::Pool { .. } => 5,
        LayerKind::Softmax => 6,
    }
}

/// Serializes a network. Fails if the network does not validate.
pub fn encode(net: &NetworkDef) -> Result<Vec<u8>> {
    net.validate()?;
    let mut w = Writer::default();
    w.bytes(MODEL_MAGIC);
    w.u16(VERSION);
    w.u32(net.layers.len());
    for d in net.input_shape {
        w.u32(d);
    }
    for layer in &net.layers {
        w.u8(kind_tag(&layer.kind));
        let name = layer.name.as_bytes();
        if name.len() > u16::MAX as usize {
            return Err(Error::Format(format!("layer name of {} bytes is too long", name.len())));
        }
        w.u16(name.len() as u16);
        w.bytes(name);
        w.u8(layer.inputs.len() as u8);
        for src in &layer.inputs {
            w.u32(match src {
                Source::Input => 0,
                Source::Layer(i) => i + 1,
            });
        }
        match &layer.kind {
            LayerKind::Conv(c) | LayerKind::Fc(c) => {
                for &d in c.weights.shape() {
                    w.u32(d);
                }
                w.u32(c.stride);
                w.u32(c.padding);
            }
            LayerKind::BatchNorm(bn) => w.u32(bn.gamma.len()),
            LayerKind::PRelu(s) => w.u32(s.len()),
            LayerKind::Pool { kind, size, stride } => {
                w.u8(match kind {
                    PoolKind::Max => 0,
                    PoolKind::Avg => 1,
                    PoolKind::GlobalAvg => 2,
                });
                w.u32(*size);
                w.u32(*stride);
            }
            LayerKind::ResidualAdd | LayerKind::Softmax => {}
        }
        let conv = layer.kind.conv();
        let (scheme, flags) = match conv.map(|c| c.precision) {
            Some(Precision::Quantized { scheme, quantize_input }) => (
                scheme.id(),
                quantize_input as u8 | (conv.unwrap().bias.is_some() as u8) << 1,
            ),
            Some(Precision::Full) => ("fp32", (conv.unwrap().bias.is_some() as u8) << 1),
            None => ("fp32", 0),
        };
        w.u8(scheme.len() as u8);
        w.bytes(scheme.as_bytes());
        w.u8(flags);
        w.mask(&layer.out_mask)?;
        w.mask(&layer.in_mask)?;
        if let Some(c) = conv {
            w.mask(&layer.kernel_mask)?;
            match c.precision.scheme() {
                Some(s) => {
                    let live = layer.weight_live_mask().expect("conv layer");
                    w.packed(&quantize_weights_live(&c.weights, s, Some(&live))?);
                }
                None => w.f32s(c.weights.data()),
            }
            if let Some(b) = &c.bias {
                w.f32s(b);
            }
        }
        match &layer.kind {
            LayerKind::BatchNorm(bn) => {
                w.f32s(&bn.gamma);
                w.f32s(&bn.beta);
                w.f32s(&bn.mean);
                w.f32s(&bn.var);
                w.f32s(&[bn.eps]);
            }
            LayerKind::PRelu(s) => w.f32s(s),
            _ => {}
        }
    }
    Ok(w.buf)
}

fn parse_precision(id: &str, flags: u8) -> Result<Precision> {
    if id == "fp32" {
        return Ok(Precision::Full);
    }
    let scheme: QuantScheme = id.parse()?;
    Ok(Precision::Quantized {
        scheme,
        quantize_input: flags & 1 == 1,
    })
}

pub fn decode(bytes: &[u8]) -> Result<NetworkDef> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MODEL_MAGIC {
        return Err(Error::Format("not a QPRN model (bad magic)".into()));
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported QPRN version {version}")));
    }
    let count = r.u32()?;
    let input_shape = [r.u32()?, r.u32()?, r.u32()?];
    let mut net = NetworkDef::new(input_shape);
    for i in 0..count {
        let tag = r.u8()?;
        let name_len = r.u16()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::Format(format!("layer {i}: name is not UTF-8")))?;
        let n_inputs = r.u8()?;
        let inputs = (0..n_inputs)
            .map(|_| {
                r.u32().and_then(|s| match s {
                    0 => Ok(Source::Input),
                    s if s <= i => Ok(Source::Layer(s - 1)),
                    s => Err(Error::Format(format!("layer {i}: input {s} is not an earlier layer"))),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let mut extents = Vec::new();
        let mut pool = None;
        match tag {
            0 | 1 => {
                for _ in 0..6 {
                    extents.push(r.u32()?);
                }
            }
            2 | 3 => extents.push(r.u32()?),
            5 => {
                let kind = match r.u8()? {
                    0 => PoolKind::Max,
                    1 => PoolKind::Avg,
                    2 => PoolKind::GlobalAvg,
                    k => return Err(Error::Format(format!("layer {i}: unknown pool kind {k}"))),
                };
                pool = Some((kind, r.u32()?, r.u32()?));
            }
            4 | 6 => {}
            t => return Err(Error::Format(format!("layer {i}: unknown kind tag {t}"))),
        }
        let scheme_len = r.u8()? as usize;
        let scheme_id = String::from_utf8(r.take(scheme_len)?.to_vec())
            .map_err(|_| Error::Format(format!("layer {i}: scheme is not UTF-8")))?;
        let flags = r.u8()?;
        // Pass-through layers carry no extents; their mask sets the width.
        let out_mask = r.mask(matches!(tag, 0..=3).then(|| extents[0]))?;
        let in_len = if matches!(tag, 0 | 1) {
            extents[1]
        } else {
            out_mask.len()
        };
        let in_mask = r.mask(Some(in_len))?;
        let kind = match tag {
            0 | 1 => {
                let (k, c, kh, kw) = (extents[0], extents[1], extents[2], extents[3]);
                let kernel_mask = r.mask(Some(k * c))?;
                let precision = parse_precision(&scheme_id, flags)?;
                let n = k * c * kh * kw;
                let weights = match precision {
                    Precision::Full => TensorF::new(vec![k, c, kh, kw], r.f32s(n)?)?,
                    Precision::Quantized { .. } => {
                        let p = r.packed()?;
                        if p.shape() != [k, c, kh, kw] {
                            return Err(Error::Format(format!("layer {i}: weight shape mismatch")));
                        }
                        dequantize(&p)
                    }
                };
                let bias = if flags & 2 == 2 { Some(r.f32s(k)?) } else { None };
                let conv = ConvLayer {
                    weights,
                    bias,
                    stride: extents[4],
                    padding: extents[5],
                    precision,
                };
                let kind = if tag == 0 {
                    LayerKind::Conv(conv)
                } else {
                    LayerKind::Fc(conv)
                };
                net.layers.push(Layer {
                    name,
                    kind,
                    inputs,
                    out_mask,
                    in_mask,
                    kernel_mask,
                });
                continue;
            }
            2 => {
                let c = extents[0];
                let bn = BatchNorm {
                    gamma: r.f32s(c)?,
                    beta: r.f32s(c)?,
                    mean: r.f32s(c)?,
                    var: r.f32s(c)?,
                    eps: r.f32s(1)?[0],
                };
                LayerKind::BatchNorm(bn)
            }
            3 => LayerKind::PRelu(r.f32s(extents[0])?),
            4 => LayerKind::ResidualAdd,
            5 => {
                let (kind, size, stride) = pool.expect("pool extents read");
                LayerKind::Pool { kind, size, stride }
            }
            _ => LayerKind::Softmax,
        };
        net.layers.push(Layer {
            name,
            kind,
            inputs,
            out_mask,
            in_mask,
            kernel_mask: Vec::new(),
        });
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing byte(s)", bytes.len() - r.pos)));
    }
    net.validate()?;
    Ok(net)
}

/// Full-precision weights of every conv/fc layer.
pub fn encode_shadow(net: &NetworkDef) -> Vec<u8> {
    let mut w = Writer::default();
    w.bytes(SHADOW_MAGIC);
    w.u16(VERSION);
    let convs: Vec<(usize, &ConvLayer)> = net
        .layers
        .iter()
        .enumerate()
        .filter_map(|(i, l)| l.kind.conv().map(|c| (i, c)))
        .collect();
    w.u32(convs.len());
    for (i, c) in convs {
        w.u32(i);
        w.u32(c.weights.len());
        w.f32s(c.weights.data());
    }
    w.buf
}

/// Replaces conv/fc weights with the shadow values from a sidecar.
pub fn apply_shadow(net: &mut NetworkDef, bytes: &[u8]) -> Result<()> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != SHADOW_MAGIC {
        return Err(Error::Format("not a QPRS sidecar (bad magic)".into()));
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported QPRS version {version}")));
    }
    for _ in 0..r.u32()? {
        let i = r.u32()?;
        let n = r.u32()?;
        let values = r.f32s(n)?;
        let conv = net
            .layers
            .get_mut(i)
            .and_then(|l| l.kind.conv_mut())
            .ok_or_else(|| Error::Format(format!("sidecar names layer {i}, which is not conv/fc")))?;
        if conv.weights.len() != n {
            return Err(Error::Format(format!("sidecar layer {i} has {n} weights")));
        }
        conv.weights = TensorF::new(conv.weights.shape().to_vec(), values)?;
    }
    if r.pos != bytes.len() {
        return Err(Error::Format("trailing bytes in sidecar".into()));
    }
    Ok(())
}

/// Path of the sidecar next to a model file: `<model>.shadow`.
pub fn shadow_path(model: &Path) -> PathBuf {
    let mut s = model.as_os_str().to_owned();
    s.push(".shadow");
    PathBuf::from(s)
}

/// Writes the model and its shadow sidecar.
pub fn save_model(net: &NetworkDef, path: &Path) -> Result<()> {
    fs::write(path, encode(net)?)?;
    fs::write(shadow_path(path), encode_shadow(net))?;
    Ok(())
}

/// Reads a model, applying the shadow sidecar when one exists.
pub fn load_model(path: &Path) -> Result<NetworkDef> {
    let mut net = decode(&fs::read(path)?)?;
    let side = shadow_path(path);
    if side.exists() {
        apply_shadow(&mut net, &fs::read(side)?)?;
    }
    Ok(net)
}
