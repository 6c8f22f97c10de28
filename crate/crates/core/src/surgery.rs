//! Network description, per-layer masks, structural pruning and size
//! accounting.
//!
//! Every conv/fc/bn/prelu layer carries an output mask and an input mask.
//! Channels that must stay aligned (a producer and its batch-norm, or all the
//! tensors summed by a residual add) form one *channel space*; pruning a
//! filter clears the matching channel everywhere in that space and in every
//! consumer that reads it. Downsample convolutions therefore share the mask
//! of the block output they are added to.

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::quant::{quantize_weights_real, QuantKind, QuantScheme};
use crate::tensor::TensorF;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Source {
    Input,
    Layer(usize),
}

impl Source {
    fn node(self) -> usize {
        match self {
            Source::Input => 0,
            Source::Layer(i) => i + 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    Full,
    Quantized {
        scheme: QuantScheme,
        /// Quantize the incoming activations (false for a binary-weight first
        /// layer that reads real-valued pixels).
        quantize_input: bool,
    },
}

impl Precision {
    pub fn scheme(&self) -> Option<&QuantScheme> {
        match self {
            Precision::Full => None,
            Precision::Quantized { scheme, .. } => Some(scheme),
        }
    }

    pub fn input_quantizer(&self) -> Option<&QuantScheme> {
        match self {
            Precision::Quantized {
                scheme,
                quantize_input: true,
            } if scheme.quantizes_activations() => Some(scheme),
            _ => None,
        }
    }

    pub fn weight_bits(&self) -> u32 {
        match self {
            Precision::Full => 32,
            Precision::Quantized { scheme, .. } => scheme.weight_bits as u32,
        }
    }
}

/// Weights of a convolution or fully-connected layer. Fully-connected layers
/// use a kernel spanning the whole input map, so an input of `C×h×w` gives
/// weights `K×C×h×w` and a `K×1×1` output.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub weights: TensorF,
    pub bias: Option<Vec<f32>>,
    pub stride: usize,
    pub padding: usize,
    pub precision: Precision,
}

impl ConvLayer {
    pub fn out_channels(&self) -> usize {
        self.weights.shape()[0]
    }
    pub fn in_channels(&self) -> usize {
        self.weights.shape()[1]
    }
    pub fn kernel_hw(&self) -> (usize, usize) {
        (self.weights.shape()[2], self.weights.shape()[3])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
    pub eps: f32,
}

impl BatchNorm {
    pub fn identity(channels: usize) -> Self {
        Self {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            eps: 1e-5,
        }
    }

    fn gather(&self, idx: &[usize]) -> Self {
        let g = |v: &[f32]| idx.iter().map(|&i| v[i]).collect();
        Self {
            gamma: g(&self.gamma),
            beta: g(&self.beta),
            mean: g(&self.mean),
            var: g(&self.var),
            eps: self.eps,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolKind {
    Max,
    Avg,
    GlobalAvg,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerKind {
    Conv(ConvLayer),
    Fc(ConvLayer),
    BatchNorm(BatchNorm),
    PRelu(Vec<f32>),
    ResidualAdd,
    Pool {
        kind: PoolKind,
        size: usize,
        stride: usize,
    },
    /// Marks the classifier output; the forward pass returns logits.
    Softmax,
}

impl LayerKind {
    pub fn tag(&self) -> &'static str {
        match self {
            LayerKind::Conv(_) => "conv",
            LayerKind::Fc(_) => "fc",
            LayerKind::BatchNorm(_) => "bn",
            LayerKind::PRelu(_) => "prelu",
            LayerKind::ResidualAdd => "residual_add",
            LayerKind::Pool { .. } => "pool",
            LayerKind::Softmax => "softmax",
        }
    }

    pub fn conv(&self) -> Option<&ConvLayer> {
        match self {
            LayerKind::Conv(c) | LayerKind::Fc(c) => Some(c),
            _ => None,
        }
    }

    pub fn conv_mut(&mut self) -> Option<&mut ConvLayer> {
        match self {
            LayerKind::Conv(c) | LayerKind::Fc(c) => Some(c),
            _ => None,
        }
    }

    fn produces_channels(&self) -> bool {
        matches!(self, LayerKind::Conv(_) | LayerKind::Fc(_))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub name: String,
    pub kind: LayerKind,
    pub inputs: Vec<Source>,
    /// One flag per output channel (unit).
    pub out_mask: Vec<bool>,
    /// One flag per input channel.
    pub in_mask: Vec<bool>,
    /// Conv/fc only: `K·C` flags, false for kernels removed by kernel pruning.
    pub kernel_mask: Vec<bool>,
}

impl Layer {
    /// A layer with all-true masks sized from `in_channels`.
    pub fn new(name: impl Into<String>, kind: LayerKind, inputs: Vec<Source>, in_channels: usize) -> Self {
        let (out, kernels) = match &kind {
            LayerKind::Conv(c) | LayerKind::Fc(c) => (c.out_channels(), c.out_channels() * c.in_channels()),
            _ => (in_channels, 0),
        };
        Self {
            name: name.into(),
            kind,
            inputs,
            out_mask: vec![true; out],
            in_mask: vec![true; in_channels],
            kernel_mask: vec![true; kernels],
        }
    }

    pub fn live_outputs(&self) -> Vec<usize> {
        live(&self.out_mask)
    }

    pub fn live_inputs(&self) -> Vec<usize> {
        live(&self.in_mask)
    }

    /// Per-element liveness of the weight tensor of a conv/fc layer.
    pub fn weight_live_mask(&self) -> Option<Vec<bool>> {
        let conv = self.kind.conv()?;
        let (k_ext, c_ext) = (conv.out_channels(), conv.in_channels());
        let (kh, kw) = conv.kernel_hw();
        let kl = kh * kw;
        let mut m = Vec::with_capacity(k_ext * c_ext * kl);
        for k in 0..k_ext {
            for c in 0..c_ext {
                let alive = self.out_mask[k] && self.in_mask[c] && self.kernel_mask[k * c_ext + c];
                m.extend(std::iter::repeat_n(alive, kl));
            }
        }
        Some(m)
    }

    /// Weights as used by the forward pass: quantized over the live entries,
    /// with every dead entry set to zero.
    pub fn effective_weights(&self) -> Option<TensorF> {
        let conv = self.kind.conv()?;
        let live = self.weight_live_mask()?;
        Some(match conv.precision.scheme() {
            Some(s) => quantize_weights_real(&conv.weights, s, Some(&live)),
            None => {
                let mut w = conv.weights.clone();
                for (v, &l) in w.data_mut().iter_mut().zip(&live) {
                    if !l {
                        *v = 0.0;
                    }
                }
                w
            }
        })
    }
}

pub(crate) fn live(mask: &[bool]) -> Vec<usize> {
    mask.iter().enumerate().filter_map(|(i, &m)| m.then_some(i)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkDef {
    /// `C, H, W` of one input sample.
    pub input_shape: [usize; 3],
    pub layers: Vec<Layer>,
}

/// Union-find over graph nodes (node 0 is the network input, node `i + 1`
/// the output of layer `i`).
#[derive(Debug, Clone)]
pub struct ChannelSpaces {
    parent: Vec<usize>,
}

impl ChannelSpaces {
    fn find(&self, mut x: usize) -> usize {
        while self.parent[x] != x {
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi] = lo;
        }
    }

    pub fn space_of(&self, src: Source) -> usize {
        self.find(src.node())
    }

    pub fn output_space(&self, layer: usize) -> usize {
        self.find(layer + 1)
    }
}

impl NetworkDef {
    pub fn new(input_shape: [usize; 3]) -> Self {
        Self {
            input_shape,
            layers: Vec::new(),
        }
    }

    /// Index of the layer producing the logits (the softmax input when the
    /// graph ends with a softmax marker).
    pub fn logits_layer(&self) -> Option<usize> {
        let last = self.layers.len().checked_sub(1)?;
        match (&self.layers[last].kind, self.layers[last].inputs.first()) {
            (LayerKind::Softmax, Some(Source::Layer(i))) => Some(*i),
            _ => Some(last),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_mask.len())
    }

    fn shape_of(&self, shapes: &[[usize; 3]], src: Source) -> [usize; 3] {
        match src {
            Source::Input => self.input_shape,
            Source::Layer(i) => shapes[i],
        }
    }

    /// Output `C, H, W` of every layer, checking extents along the way.
    pub fn output_shapes(&self) -> Result<Vec<[usize; 3]>> {
        let mut shapes: Vec<[usize; 3]> = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let err = |msg: String| Error::Layer { layer: i, msg };
            for src in &layer.inputs {
                if let Source::Layer(j) = src {
                    if *j >= i {
                        return Err(err(format!("input {j} is not an earlier layer")));
                    }
                }
            }
            let expected_inputs = if matches!(layer.kind, LayerKind::ResidualAdd) {
                2
            } else {
                1
            };
            if layer.inputs.len() != expected_inputs {
                return Err(err(format!(
                    "{} takes {expected_inputs} input(s), has {}",
                    layer.kind.tag(),
                    layer.inputs.len()
                )));
            }
            let [c, h, w] = self.shape_of(&shapes, layer.inputs[0]);
            let out = match &layer.kind {
                LayerKind::Conv(conv) => {
                    if conv.in_channels() != c {
                        return Err(err(format!("expects {} channels, input has {c}", conv.in_channels())));
                    }
                    let (kh, kw) = conv.kernel_hw();
                    if conv.stride == 0 || h + 2 * conv.padding < kh || w + 2 * conv.padding < kw {
                        return Err(err("kernel larger than padded input".into()));
                    }
                    [
                        conv.out_channels(),
                        (h + 2 * conv.padding - kh) / conv.stride + 1,
                        (w + 2 * conv.padding - kw) / conv.stride + 1,
                    ]
                }
                LayerKind::Fc(conv) => {
                    if conv.in_channels() != c || conv.kernel_hw() != (h, w) {
                        return Err(err(format!(
                            "fc weights {:?} do not match input {c}x{h}x{w}",
                            conv.weights.shape()
                        )));
                    }
                    [conv.out_channels(), 1, 1]
                }
                LayerKind::BatchNorm(bn) => {
                    if bn.gamma.len() != c || bn.beta.len() != c || bn.mean.len() != c || bn.var.len() != c {
                        return Err(err("batch-norm parameter length mismatch".into()));
                    }
                    [c, h, w]
                }
                LayerKind::PRelu(slopes) => {
                    if slopes.len() != c {
                        return Err(err("prelu slope count mismatch".into()));
                    }
                    [c, h, w]
                }
                LayerKind::ResidualAdd => {
                    let other = self.shape_of(&shapes, layer.inputs[1]);
                    if other != [c, h, w] {
                        return Err(err(format!("residual operands {:?} vs {other:?}", [c, h, w])));
                    }
                    [c, h, w]
                }
                LayerKind::Pool { kind, size, stride } => match kind {
                    PoolKind::GlobalAvg => [c, 1, 1],
                    _ => {
                        if *size == 0 || *stride == 0 || *size > h || *size > w {
                            return Err(err("bad pooling window".into()));
                        }
                        [c, (h - size) / stride + 1, (w - size) / stride + 1]
                    }
                },
                LayerKind::Softmax => [c, h, w],
            };
            if layer.in_mask.len() != c || layer.out_mask.len() != out[0] {
                return Err(err("mask length mismatch".into()));
            }
            if let Some(conv) = layer.kind.conv() {
                if layer.kernel_mask.len() != conv.out_channels() * conv.in_channels() {
                    return Err(err("kernel mask length mismatch".into()));
                }
                if let Some(b) = &conv.bias {
                    if b.len() != conv.out_channels() {
                        return Err(err("bias length mismatch".into()));
                    }
                }
                if let Some(s) = conv.precision.scheme() {
                    s.validate()?;
                }
            }
            shapes.push(out);
        }
        Ok(shapes)
    }

    pub fn channel_spaces(&self) -> ChannelSpaces {
        let mut cs = ChannelSpaces {
            parent: (0..=self.layers.len()).collect(),
        };
        for (i, layer) in self.layers.iter().enumerate() {
            if !layer.kind.produces_channels() {
                for src in &layer.inputs {
                    cs.union(i + 1, src.node());
                }
            }
        }
        cs
    }

    /// Conv/fc layers whose output lies in the given channel space.
    pub fn producers(&self, spaces: &ChannelSpaces, space: usize) -> Vec<usize> {
        (0..self.layers.len())
            .filter(|&i| self.layers[i].kind.produces_channels() && spaces.output_space(i) == space)
            .collect()
    }

    /// Conv/fc layers reading the given channel space.
    pub fn consumers(&self, spaces: &ChannelSpaces, space: usize) -> Vec<usize> {
        (0..self.layers.len())
            .filter(|&i| self.layers[i].kind.produces_channels() && spaces.space_of(self.layers[i].inputs[0]) == space)
            .collect()
    }

    /// Checks shapes plus mask alignment: every in-mask equals the out-mask of
    /// its producer, pass-through layers keep masks equal, and residual
    /// operands agree.
    pub fn validate(&self) -> Result<()> {
        self.output_shapes()?;
        for (i, layer) in self.layers.iter().enumerate() {
            let err = |msg: &str| Error::Mask(format!("layer {i} ({}): {msg}", layer.name));
            for src in &layer.inputs {
                let src_mask: Vec<bool> = match src {
                    Source::Input => vec![true; self.input_shape[0]],
                    Source::Layer(j) => self.layers[*j].out_mask.clone(),
                };
                if src_mask != layer.in_mask {
                    return Err(err("input mask disagrees with producer output mask"));
                }
            }
            if !layer.kind.produces_channels() && layer.in_mask != layer.out_mask {
                return Err(err("pass-through layer with differing masks"));
            }
            if !layer.out_mask.iter().any(|&b| b) {
                return Err(err("no live output channel"));
            }
        }
        Ok(())
    }

    /// Whether the filters of `layer` may be pruned: a conv/fc layer whose
    /// channel space neither contains the network input nor the logits, and
    /// that keeps more than one live filter.
    pub fn is_filter_prunable(&self, layer: usize) -> bool {
        let Some(l) = self.layers.get(layer) else {
            return false;
        };
        if !l.kind.produces_channels() {
            return false;
        }
        let spaces = self.channel_spaces();
        let space = spaces.output_space(layer);
        let logits = self.logits_layer().map(|i| spaces.output_space(i));
        space != spaces.space_of(Source::Input)
            && Some(space) != logits
            && l.out_mask.iter().filter(|&&b| b).count() > 1
    }

    /// Removes the listed output filters of `layer` and the input channels that
    /// read them, across the whole channel space.
    pub fn apply_filter_prune(&self, layer: usize, prune_set: &[usize]) -> Result<NetworkDef> {
        let mut net = self.clone();
        net.apply_filter_prune_in_place(layer, prune_set)?;
        Ok(net)
    }

    pub fn apply_filter_prune_in_place(&mut self, layer: usize, prune_set: &[usize]) -> Result<()> {
        let l = self.layers.get(layer).ok_or(Error::Index {
            index: layer,
            extent: self.layers.len(),
        })?;
        if !l.kind.produces_channels() {
            return Err(Error::Mask(format!("layer {layer} ({}) has no filters", l.kind.tag())));
        }
        if prune_set.is_empty() {
            return Ok(());
        }
        let k_ext = l.out_mask.len();
        let set: BTreeSet<usize> = prune_set.iter().copied().collect();
        for &k in &set {
            if k >= k_ext {
                return Err(Error::Index {
                    index: k,
                    extent: k_ext,
                });
            }
            if !l.out_mask[k] {
                return Err(Error::Mask(format!("filter {k} of layer {layer} is already pruned")));
            }
        }
        let survivors = l.out_mask.iter().filter(|&&b| b).count() - set.len();
        if survivors == 0 {
            return Err(Error::Mask(format!(
                "pruning would remove every filter of layer {layer}"
            )));
        }
        let spaces = self.channel_spaces();
        let space = spaces.output_space(layer);
        if space == spaces.space_of(Source::Input) {
            return Err(Error::Mask(format!(
                "layer {layer} shares channels with the network input through a residual path"
            )));
        }
        if self.logits_layer().map(|i| spaces.output_space(i)) == Some(space) {
            return Err(Error::Mask(format!("layer {layer} produces the class logits")));
        }
        for i in 0..self.layers.len() {
            let out_in_space = spaces.output_space(i) == space;
            let in_in_space = spaces.space_of(self.layers[i].inputs[0]) == space;
            let lay = &mut self.layers[i];
            for &k in &set {
                if out_in_space {
                    if k >= lay.out_mask.len() {
                        return Err(Error::Mask(format!("residual misalignment at layer {i}")));
                    }
                    lay.out_mask[k] = false;
                }
                if in_in_space {
                    if k >= lay.in_mask.len() {
                        return Err(Error::Mask(format!("residual misalignment at layer {i}")));
                    }
                    lay.in_mask[k] = false;
                }
            }
        }
        self.validate()
    }

    /// Marks kernels `(filter, channel)` of a conv/fc layer as removed and
    /// zeroes their weights. Masks are otherwise untouched.
    pub fn apply_kernel_prune(&self, layer: usize, prune_set: &[(usize, usize)]) -> Result<NetworkDef> {
        let mut net = self.clone();
        let l = net.layers.get_mut(layer).ok_or(Error::Index {
            index: layer,
            extent: self.layers.len(),
        })?;
        let conv = l
            .kind
            .conv_mut()
            .ok_or_else(|| Error::Mask(format!("layer {layer} has no kernels")))?;
        let (k_ext, c_ext) = (conv.out_channels(), conv.in_channels());
        let (kh, kw) = conv.kernel_hw();
        let kl = kh * kw;
        for &(k, c) in prune_set {
            if k >= k_ext {
                return Err(Error::Index {
                    index: k,
                    extent: k_ext,
                });
            }
            if c >= c_ext {
                return Err(Error::Index {
                    index: c,
                    extent: c_ext,
                });
            }
            l.kernel_mask[k * c_ext + c] = false;
            let s = (k * c_ext + c) * kl;
            conv.weights.data_mut()[s..s + kl].fill(0.0);
        }
        Ok(net)
    }

    /// Physically removes masked channels. The result has all-true channel
    /// masks; kernel masks are carried over.
    pub fn shrink(&self) -> Result<NetworkDef> {
        self.validate()?;
        let mut layers = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let outs = layer.live_outputs();
            let ins = layer.live_inputs();
            let kind = match &layer.kind {
                LayerKind::Conv(c) | LayerKind::Fc(c) => {
                    let conv = ConvLayer {
                        weights: c.weights.gather(&outs, Some(&ins))?,
                        bias: c.bias.as_ref().map(|b| outs.iter().map(|&k| b[k]).collect()),
                        stride: c.stride,
                        padding: c.padding,
                        precision: c.precision,
                    };
                    if matches!(layer.kind, LayerKind::Conv(_)) {
                        LayerKind::Conv(conv)
                    } else {
                        LayerKind::Fc(conv)
                    }
                }
                LayerKind::BatchNorm(bn) => LayerKind::BatchNorm(bn.gather(&outs)),
                LayerKind::PRelu(s) => LayerKind::PRelu(outs.iter().map(|&k| s[k]).collect()),
                other => other.clone(),
            };
            let c_ext = layer.in_mask.len();
            let kernel_mask = if layer.kernel_mask.is_empty() {
                Vec::new()
            } else {
                outs.iter()
                    .flat_map(|&k| ins.iter().map(move |&c| (k, c)))
                    .map(|(k, c)| layer.kernel_mask[k * c_ext + c])
                    .collect()
            };
            layers.push(Layer {
                name: layer.name.clone(),
                kind,
                inputs: layer.inputs.clone(),
                out_mask: vec![true; outs.len()],
                in_mask: vec![true; ins.len()],
                kernel_mask,
            });
        }
        let net = NetworkDef {
            input_shape: self.input_shape,
            layers,
        };
        net.validate()?;
        Ok(net)
    }

    /// Live sub-tensor of a conv/fc layer plus the original filter and channel
    /// indices it was gathered from.
    pub fn live_weights(&self, layer: usize) -> Result<(TensorF, Vec<usize>, Vec<usize>)> {
        let l = &self.layers[layer];
        let conv = l.kind.conv().ok_or_else(|| Error::Layer {
            layer,
            msg: "not a conv/fc layer".into(),
        })?;
        let outs = l.live_outputs();
        let ins = l.live_inputs();
        Ok((conv.weights.gather(&outs, Some(&ins))?, outs, ins))
    }

    /// Parameter, bit and size accounting over the live structure.
    pub fn account(&self) -> SizeReport {
        let mut rows = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let live_out = layer.out_mask.iter().filter(|&&b| b).count() as u64;
            let mut row = LayerSize {
                layer: i,
                name: layer.name.clone(),
                kind: layer.kind.tag(),
                scheme: "fp32",
                params: 0,
                param_bits: 0,
                aux_params: 0,
                aux_bits: 0,
                filters: layer.out_mask.len() as u64,
                live_filters: live_out,
            };
            match &layer.kind {
                LayerKind::Conv(c) | LayerKind::Fc(c) => {
                    let (kh, kw) = c.kernel_hw();
                    let c_ext = c.in_channels();
                    let mut kernels = 0u64;
                    for k in 0..c.out_channels() {
                        for ch in 0..c_ext {
                            if layer.out_mask[k] && layer.in_mask[ch] && layer.kernel_mask[k * c_ext + ch] {
                                kernels += 1;
                            }
                        }
                    }
                    let weights = kernels * (kh * kw) as u64;
                    let bias = if c.bias.is_some() { live_out } else { 0 };
                    row.params = weights + bias;
                    row.param_bits = weights * c.precision.weight_bits() as u64 + bias * 32;
                    if let Some(s) = c.precision.scheme() {
                        row.scheme = s.id();
                        if s.kind == QuantKind::XnorNet {
                            row.aux_params = live_out;
                        }
                    }
                }
                LayerKind::BatchNorm(_) => row.aux_params = 4 * live_out,
                LayerKind::PRelu(_) => row.aux_params = live_out,
                _ => {}
            }
            row.aux_bits = row.aux_params * 32;
            rows.push(row);
        }
        SizeReport { layers: rows }
    }
}

/// One row of the size table. `params`/`param_bits` cover weights and biases;
/// Xnor-Net scales and batch-norm/PReLU parameters go to the `aux_*` columns.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerSize {
    pub layer: usize,
    pub name: String,
    pub kind: &'static str,
    pub scheme: &'static str,
    pub params: u64,
    pub param_bits: u64,
    pub aux_params: u64,
    pub aux_bits: u64,
    pub filters: u64,
    pub live_filters: u64,
}

pub const BITS_PER_MIB: f64 = 8.0 * 1024.0 * 1024.0;

impl LayerSize {
    pub fn bits(&self) -> u64 {
        self.param_bits + self.aux_bits
    }

    /// Weight-and-bias storage in MiB.
    pub fn size_mib(&self) -> f64 {
        self.param_bits as f64 / BITS_PER_MIB
    }

    pub fn pruned_ratio_pct(&self) -> f64 {
        if self.filters == 0 {
            0.0
        } else {
            100.0 * (1.0 - self.live_filters as f64 / self.filters as f64)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SizeReport {
    pub layers: Vec<LayerSize>,
}

impl SizeReport {
    pub fn total_params(&self) -> u64 {
        self.layers.iter().map(|l| l.params).sum()
    }

    pub fn total_bits(&self) -> u64 {
        self.layers.iter().map(LayerSize::bits).sum()
    }

    pub fn total_mib(&self) -> f64 {
        self.total_bits() as f64 / BITS_PER_MIB
    }

    pub fn row(&self, name: &str) -> Option<&LayerSize> {
        self.layers.iter().find(|l| l.name == name)
    }
}

/// Thousands, truncated: `9408 → "9K"`.
pub fn format_kilo(n: u64) -> String {
    format!("{}K", n / 1000)
}

/// Three decimals, truncated toward zero.
pub fn format_mib(mib: f64) -> String {
    format!("{:.3}", (mib * 1000.0 + 1e-9).floor() / 1000.0)
}
