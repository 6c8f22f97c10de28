//! Generic forward and backward passes over a [`NetworkDef`].
//!
//! A [`PreparedNet`] holds the effective parameters (quantized, masked) in
//! the working float type. The forward pass caches every layer output so the
//! backward pass can recompute what it needs.

use crate::error::{Error, Result};
use crate::quant::{activation_ste_pass, quantize_activation, QuantScheme};
use crate::real::Real;
use crate::surgery::{LayerKind, NetworkDef, PoolKind, Source};

use super::binary::BinaryConv;
use super::kernels::{col2im, gemm_nn, gemm_nt, gemm_tn, im2col, ConvGeom};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch-norm uses running statistics.
    Eval,
    /// Batch-norm normalises with batch statistics.
    Train,
}

#[derive(Debug, Clone)]
pub(crate) struct ConvOp<T> {
    pub w: Vec<T>,
    pub bias: Option<Vec<T>>,
    pub k: usize,
    pub geom: ConvGeom,
    pub out_live: Vec<bool>,
    pub in_quant: Option<QuantScheme>,
    pub binary: Option<BinaryConv>,
}

#[derive(Debug, Clone)]
pub(crate) struct BnOp<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub eps: T,
    pub live: Vec<bool>,
}

#[derive(Debug, Clone)]
pub(crate) enum Op<T> {
    Conv(ConvOp<T>),
    Bn(BnOp<T>),
    PRelu { slopes: Vec<T>, live: Vec<bool> },
    Add,
    Pool { kind: PoolKind, size: usize, stride: usize },
    Identity,
}

#[derive(Debug, Clone)]
pub struct PreparedNet<T> {
    pub(crate) ops: Vec<Op<T>>,
    pub(crate) inputs: Vec<Vec<Source>>,
    pub(crate) in_shapes: Vec<[usize; 3]>,
    pub(crate) out_shapes: Vec<[usize; 3]>,
    pub(crate) input_shape: [usize; 3],
    pub(crate) logits: usize,
}

fn cvt<T: Real>(v: &[f32]) -> Vec<T> {
    v.iter().map(|&x| T::from_f32(x)).collect()
}

impl<T: Real> PreparedNet<T> {
    /// Prepares the float path. `binary_fast_path` additionally packs binary
    /// layers whose inputs are binarized, for xnor/popcount inference.
    pub fn new(net: &NetworkDef, binary_fast_path: bool) -> Result<Self> {
        let out_shapes = net.output_shapes()?;
        let logits = net.logits_layer().ok_or_else(|| Error::Shape("empty network".into()))?;
        let mut ops = Vec::with_capacity(net.layers.len());
        let mut in_shapes = Vec::with_capacity(net.layers.len());
        for (i, layer) in net.layers.iter().enumerate() {
            let in_shape = match layer.inputs[0] {
                Source::Input => net.input_shape,
                Source::Layer(j) => out_shapes[j],
            };
            in_shapes.push(in_shape);
            let op = match &layer.kind {
                LayerKind::Conv(c) | LayerKind::Fc(c) => {
                    let eff = layer.effective_weights().expect("conv layer");
                    let (kh, kw) = c.kernel_hw();
                    let (stride, pad) = match layer.kind {
                        LayerKind::Fc(_) => (1, 0),
                        _ => (c.stride, c.padding),
                    };
                    let geom = ConvGeom {
                        c: in_shape[0],
                        h: in_shape[1],
                        w: in_shape[2],
                        kh,
                        kw,
                        stride,
                        pad,
                        ho: out_shapes[i][1],
                        wo: out_shapes[i][2],
                    };
                    let in_quant = c.precision.input_quantizer().copied();
                    let binary = match (binary_fast_path, c.precision.scheme(), in_quant) {
                        (true, Some(s), Some(q)) if s.binary_weights() && q.binary_activations() => {
                            Some(BinaryConv::new(layer, &c.weights, s)?)
                        }
                        _ => None,
                    };
                    Op::Conv(ConvOp {
                        w: cvt(eff.data()),
                        bias: c.bias.as_deref().map(cvt),
                        k: c.out_channels(),
                        geom,
                        out_live: layer.out_mask.clone(),
                        in_quant,
                        binary,
                    })
                }
                LayerKind::BatchNorm(bn) => Op::Bn(BnOp {
                    gamma: cvt(&bn.gamma),
                    beta: cvt(&bn.beta),
                    mean: cvt(&bn.mean),
                    var: cvt(&bn.var),
                    eps: T::from_f32(bn.eps),
                    live: layer.out_mask.clone(),
                }),
                LayerKind::PRelu(s) => Op::PRelu {
                    slopes: cvt(s),
                    live: layer.out_mask.clone(),
                },
                LayerKind::ResidualAdd => Op::Add,
                LayerKind::Pool { kind, size, stride } => Op::Pool {
                    kind: *kind,
                    size: *size,
                    stride: *stride,
                },
                LayerKind::Softmax => Op::Identity,
            };
            ops.push(op);
        }
        Ok(Self {
            ops,
            inputs: net.layers.iter().map(|l| l.inputs.clone()).collect(),
            in_shapes,
            out_shapes,
            input_shape: net.input_shape,
            logits,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.out_shapes[self.logits][0]
    }

    pub fn sample_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn num_layers(&self) -> usize {
        self.ops.len()
    }

    /// Mutable views of every trainable parameter vector, in layer order.
    /// Conv/fc weights are the effective (quantized, masked) values.
    pub fn params_mut(&mut self) -> Vec<(usize, ParamKind, &mut [T])> {
        let mut out = Vec::new();
        for (i, op) in self.ops.iter_mut().enumerate() {
            match op {
                Op::Conv(c) => {
                    out.push((i, ParamKind::Weights, c.w.as_mut_slice()));
                    if let Some(b) = &mut c.bias {
                        out.push((i, ParamKind::Bias, b.as_mut_slice()));
                    }
                }
                Op::Bn(b) => {
                    out.push((i, ParamKind::Gamma, b.gamma.as_mut_slice()));
                    out.push((i, ParamKind::Beta, b.beta.as_mut_slice()));
                }
                Op::PRelu { slopes, .. } => out.push((i, ParamKind::Slopes, slopes.as_mut_slice())),
                _ => {}
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weights,
    Bias,
    Gamma,
    Beta,
    Slopes,
}

/// Per-batch statistics produced by train-mode batch-norm layers.
#[derive(Debug, Clone)]
pub struct BnBatchStats<T> {
    pub mean: Vec<T>,
    /// Biased batch variance.
    pub var: Vec<T>,
    pub count: usize,
}

#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    pub n: usize,
    pub mode: Mode,
    pub outputs: Vec<Vec<T>>,
    pub bn_stats: Vec<Option<BnBatchStats<T>>>,
    pool_argmax: Vec<Option<Vec<u32>>>,
}

impl<T: Real> ForwardCache<T> {
    pub fn logits<'a>(&'a self, net: &PreparedNet<T>) -> &'a [T] {
        &self.outputs[net.logits]
    }
}

fn source<'a, T>(input: &'a [T], outputs: &'a [Vec<T>], src: Source) -> &'a [T] {
    match src {
        Source::Input => input,
        Source::Layer(j) => &outputs[j],
    }
}

/// Forward pass over a batch of `n` samples laid out `N×C×H×W`.
pub fn forward<T: Real>(net: &PreparedNet<T>, input: &[T], n: usize, mode: Mode) -> Result<ForwardCache<T>> {
    if input.len() != n * net.sample_len() {
        return Err(Error::Shape(format!(
            "batch of {n} needs {} values, got {}",
            n * net.sample_len(),
            input.len()
        )));
    }
    let layers = net.ops.len();
    let mut outputs: Vec<Vec<T>> = Vec::with_capacity(layers);
    let mut bn_stats = vec![None; layers];
    let mut pool_argmax = vec![None; layers];
    for i in 0..layers {
        let [c, h, w] = net.in_shapes[i];
        let [oc, oh, ow] = net.out_shapes[i];
        let plane_in = c * h * w;
        let plane_out = oc * oh * ow;
        let x = source(input, &outputs, net.inputs[i][0]);
        let mut y = vec![T::zero(); n * plane_out];
        match &net.ops[i] {
            Op::Conv(op) => conv_forward_batch(op, x, n, &mut y),
            Op::Bn(op) => {
                let hw = h * w;
                let (mean, var) = match mode {
                    Mode::Eval => (op.mean.clone(), op.var.clone()),
                    Mode::Train => {
                        let (m, v) = channel_moments(x, n, c, hw, &op.live);
                        bn_stats[i] = Some(BnBatchStats {
                            mean: m.clone(),
                            var: v.clone(),
                            count: n * hw,
                        });
                        (m, v)
                    }
                };
                for s in 0..n {
                    for ch in 0..c {
                        if !op.live[ch] {
                            continue;
                        }
                        let inv = (var[ch] + op.eps).sqrt().recip();
                        let (g, b, m) = (op.gamma[ch], op.beta[ch], mean[ch]);
                        let off = s * plane_in + ch * hw;
                        for (yv, &xv) in y[off..off + hw].iter_mut().zip(&x[off..off + hw]) {
                            *yv = g * (xv - m) * inv + b;
                        }
                    }
                }
            }
            Op::PRelu { slopes, live } => {
                let hw = h * w;
                for s in 0..n {
                    for ch in 0..c {
                        if !live[ch] {
                            continue;
                        }
                        let off = s * plane_in + ch * hw;
                        let a = slopes[ch];
                        for (yv, &xv) in y[off..off + hw].iter_mut().zip(&x[off..off + hw]) {
                            *yv = if xv > T::zero() { xv } else { a * xv };
                        }
                    }
                }
            }
            Op::Add => {
                let x2 = source(input, &outputs, net.inputs[i][1]);
                for ((yv, &a), &b) in y.iter_mut().zip(x).zip(x2) {
                    *yv = a + b;
                }
            }
            Op::Pool { kind, size, stride } => {
                let arg = pool_forward(*kind, *size, *stride, x, n, [c, h, w], [oh, ow], &mut y);
                pool_argmax[i] = arg;
            }
            Op::Identity => y.copy_from_slice(x),
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("forward pass"));
        }
        outputs.push(y);
    }
    Ok(ForwardCache {
        n,
        mode,
        outputs,
        bn_stats,
        pool_argmax,
    })
}

fn channel_moments<T: Real>(x: &[T], n: usize, c: usize, hw: usize, live: &[bool]) -> (Vec<T>, Vec<T>) {
    let count = T::from_usize(n * hw);
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ch in 0..c {
        if !live[ch] {
            continue;
        }
        let mut s = T::zero();
        for smp in 0..n {
            let off = (smp * c + ch) * hw;
            for &v in &x[off..off + hw] {
                s += v;
            }
        }
        let m = s / count;
        let mut q = T::zero();
        for smp in 0..n {
            let off = (smp * c + ch) * hw;
            for &v in &x[off..off + hw] {
                q += (v - m) * (v - m);
            }
        }
        mean[ch] = m;
        var[ch] = q / count;
    }
    (mean, var)
}

pub(crate) fn quantize_input<T: Real>(x: &[T], q: Option<&QuantScheme>) -> Option<Vec<T>> {
    q.map(|s| x.iter().map(|&v| quantize_activation(v, s)).collect())
}

fn conv_forward_batch<T: Real>(op: &ConvOp<T>, x: &[T], n: usize, y: &mut [T]) {
    let g = op.geom;
    let plane_in = g.c * g.h * g.w;
    let p = g.positions();
    let plane_out = op.k * p;
    if let Some(bin) = &op.binary {
        for s in 0..n {
            bin.forward_sample(
                &x[s * plane_in..(s + 1) * plane_in],
                &g,
                &mut y[s * plane_out..(s + 1) * plane_out],
            );
        }
    } else {
        let mut cols = vec![T::zero(); g.patch_len() * p];
        for s in 0..n {
            let xs = &x[s * plane_in..(s + 1) * plane_in];
            let quantized = quantize_input(xs, op.in_quant.as_ref());
            im2col(quantized.as_deref().unwrap_or(xs), &g, &mut cols);
            gemm_nn(
                op.k,
                p,
                g.patch_len(),
                &op.w,
                &cols,
                &mut y[s * plane_out..(s + 1) * plane_out],
            );
        }
    }
    for s in 0..n {
        for k in 0..op.k {
            let out = &mut y[s * plane_out + k * p..s * plane_out + (k + 1) * p];
            if !op.out_live[k] {
                out.fill(T::zero());
            } else if let Some(b) = &op.bias {
                for v in out.iter_mut() {
                    *v += b[k];
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn pool_forward<T: Real>(
    kind: PoolKind,
    size: usize,
    stride: usize,
    x: &[T],
    n: usize,
    [c, h, w]: [usize; 3],
    [oh, ow]: [usize; 2],
    y: &mut [T],
) -> Option<Vec<u32>> {
    match kind {
        PoolKind::GlobalAvg => {
            let hw = h * w;
            let inv = T::from_usize(hw).recip();
            for (i, yv) in y.iter_mut().enumerate() {
                let mut s = T::zero();
                for &v in &x[i * hw..(i + 1) * hw] {
                    s += v;
                }
                *yv = s * inv;
            }
            None
        }
        PoolKind::Avg => {
            let inv = T::from_usize(size * size).recip();
            for plane in 0..n * c {
                let xp = &x[plane * h * w..(plane + 1) * h * w];
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut s = T::zero();
                        for dy in 0..size {
                            for dx in 0..size {
                                s += xp[(oy * stride + dy) * w + ox * stride + dx];
                            }
                        }
                        y[plane * oh * ow + oy * ow + ox] = s * inv;
                    }
                }
            }
            None
        }
        PoolKind::Max => {
            let mut arg = vec![0u32; n * c * oh * ow];
            for plane in 0..n * c {
                let xp = &x[plane * h * w..(plane + 1) * h * w];
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = (oy * stride) * w + ox * stride;
                        for dy in 0..size {
                            for dx in 0..size {
                                let idx = (oy * stride + dy) * w + ox * stride + dx;
                                if xp[idx] > xp[best] {
                                    best = idx;
                                }
                            }
                        }
                        let o = plane * oh * ow + oy * ow + ox;
                        y[o] = xp[best];
                        arg[o] = best as u32;
                    }
                }
            }
            Some(arg)
        }
    }
}

/// Gradients with respect to the effective parameters of one layer.
#[derive(Debug, Clone, Default)]
pub struct LayerGrads<T> {
    /// Conv/fc: gradient w.r.t. the (quantized, masked) weights.
    pub weights: Vec<T>,
    pub bias: Vec<T>,
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub slopes: Vec<T>,
}

impl<T> LayerGrads<T> {
    pub fn get(&self, kind: ParamKind) -> &[T] {
        match kind {
            ParamKind::Weights => &self.weights,
            ParamKind::Bias => &self.bias,
            ParamKind::Gamma => &self.gamma,
            ParamKind::Beta => &self.beta,
            ParamKind::Slopes => &self.slopes,
        }
    }
}

/// Backpropagates `d_logits` (`N×classes`) through the cached forward pass.
pub fn backward<T: Real>(
    net: &PreparedNet<T>,
    cache: &ForwardCache<T>,
    input: &[T],
    d_logits: &[T],
) -> Result<Vec<LayerGrads<T>>> {
    let n = cache.n;
    let layers = net.ops.len();
    let mut grads: Vec<Option<Vec<T>>> = vec![None; layers];
    grads[net.logits] = Some(d_logits.to_vec());
    let mut out = vec![LayerGrads::default(); layers];
    for i in (0..layers).rev() {
        let Some(dy) = grads[i].take() else {
            continue;
        };
        let [c, h, w] = net.in_shapes[i];
        let plane_in = c * h * w;
        let x = source(input, &cache.outputs, net.inputs[i][0]);
        let mut dx = vec![T::zero(); n * plane_in];
        match &net.ops[i] {
            Op::Conv(op) => {
                let g = op.geom;
                let p = g.positions();
                let pl = g.patch_len();
                let plane_out = op.k * p;
                let mut dw = vec![T::zero(); op.k * pl];
                let mut db = vec![T::zero(); op.k];
                let mut cols = vec![T::zero(); pl * p];
                let mut dcols = vec![T::zero(); pl * p];
                for s in 0..n {
                    let dys = &dy[s * plane_out..(s + 1) * plane_out];
                    let xs = &x[s * plane_in..(s + 1) * plane_in];
                    let quantized = quantize_input(xs, op.in_quant.as_ref());
                    im2col(quantized.as_deref().unwrap_or(xs), &g, &mut cols);
                    gemm_nt(op.k, pl, p, dys, &cols, &mut dw);
                    for k in 0..op.k {
                        if op.out_live[k] {
                            for &v in &dys[k * p..(k + 1) * p] {
                                db[k] += v;
                            }
                        }
                    }
                    dcols.fill(T::zero());
                    gemm_tn(pl, p, op.k, &op.w, dys, &mut dcols);
                    let dxs = &mut dx[s * plane_in..(s + 1) * plane_in];
                    col2im(&dcols, &g, dxs);
                    if let Some(q) = &op.in_quant {
                        for (d, &xv) in dxs.iter_mut().zip(xs) {
                            if !activation_ste_pass(xv, q) {
                                *d = T::zero();
                            }
                        }
                    }
                }
                for k in 0..op.k {
                    if !op.out_live[k] {
                        dw[k * pl..(k + 1) * pl].fill(T::zero());
                    }
                }
                out[i].weights = dw;
                if op.bias.is_some() {
                    out[i].bias = db;
                }
            }
            Op::Bn(op) => {
                let hw = h * w;
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                let (mean, var) = match (&cache.bn_stats[i], cache.mode) {
                    (Some(st), Mode::Train) => (st.mean.clone(), st.var.clone()),
                    _ => (op.mean.clone(), op.var.clone()),
                };
                let m = T::from_usize(n * hw);
                for ch in 0..c {
                    if !op.live[ch] {
                        continue;
                    }
                    let inv = (var[ch] + op.eps).sqrt().recip();
                    let (mut sum_dy, mut sum_dy_xhat) = (T::zero(), T::zero());
                    for s in 0..n {
                        let off = s * plane_in + ch * hw;
                        for t in off..off + hw {
                            let xhat = (x[t] - mean[ch]) * inv;
                            sum_dy += dy[t];
                            sum_dy_xhat += dy[t] * xhat;
                        }
                    }
                    dgamma[ch] = sum_dy_xhat;
                    dbeta[ch] = sum_dy;
                    let g = op.gamma[ch];
                    for s in 0..n {
                        let off = s * plane_in + ch * hw;
                        for t in off..off + hw {
                            dx[t] = match cache.mode {
                                Mode::Eval => dy[t] * g * inv,
                                Mode::Train => {
                                    let xhat = (x[t] - mean[ch]) * inv;
                                    g * inv / m * (m * dy[t] - sum_dy - xhat * sum_dy_xhat)
                                }
                            };
                        }
                    }
                }
                out[i].gamma = dgamma;
                out[i].beta = dbeta;
            }
            Op::PRelu { slopes, live } => {
                let hw = h * w;
                let mut da = vec![T::zero(); c];
                for s in 0..n {
                    for ch in 0..c {
                        if !live[ch] {
                            continue;
                        }
                        let off = s * plane_in + ch * hw;
                        for t in off..off + hw {
                            if x[t] > T::zero() {
                                dx[t] = dy[t];
                            } else {
                                dx[t] = dy[t] * slopes[ch];
                                da[ch] += dy[t] * x[t];
                            }
                        }
                    }
                }
                out[i].slopes = da;
            }
            Op::Add => {
                accumulate(&mut grads, net.inputs[i][1], &dy);
                dx.copy_from_slice(&dy);
            }
            Op::Pool { kind, size, stride } => {
                let [_, oh, ow] = net.out_shapes[i];
                match kind {
                    PoolKind::GlobalAvg => {
                        let hw = h * w;
                        let inv = T::from_usize(hw).recip();
                        for (plane, &d) in dy.iter().enumerate() {
                            for v in &mut dx[plane * hw..(plane + 1) * hw] {
                                *v = d * inv;
                            }
                        }
                    }
                    PoolKind::Avg => {
                        let inv = T::from_usize(size * size).recip();
                        for plane in 0..n * c {
                            for oy in 0..oh {
                                for ox in 0..ow {
                                    let d = dy[plane * oh * ow + oy * ow + ox] * inv;
                                    for ddy in 0..*size {
                                        for ddx in 0..*size {
                                            dx[plane * h * w + (oy * stride + ddy) * w + ox * stride + ddx] += d;
                                        }
                                    }
                                }
                            }
                        }
                    }
                    PoolKind::Max => {
                        let arg = cache.pool_argmax[i].as_ref().expect("max-pool argmax cached");
                        for plane in 0..n * c {
                            for o in 0..oh * ow {
                                let idx = plane * oh * ow + o;
                                dx[plane * h * w + arg[idx] as usize] += dy[idx];
                            }
                        }
                    }
                }
            }
            Op::Identity => dx.copy_from_slice(&dy),
        }
        accumulate(&mut grads, net.inputs[i][0], &dx);
    }
    Ok(out)
}

fn accumulate<T: Real>(grads: &mut [Option<Vec<T>>], src: Source, d: &[T]) {
    if let Source::Layer(j) = src {
        match &mut grads[j] {
            Some(g) => {
                for (a, &b) in g.iter_mut().zip(d) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(d.to_vec()),
        }
    }
}

/// Mean softmax cross-entropy and its gradient w.r.t. the logits.
pub fn softmax_cross_entropy<T: Real>(logits: &[T], labels: &[usize], classes: usize) -> (T, Vec<T>) {
    let n = labels.len();
    let mut grad = vec![T::zero(); logits.len()];
    let mut loss = T::zero();
    let inv_n = T::from_usize(n).recip();
    for (s, &label) in labels.iter().enumerate() {
        let row = &logits[s * classes..(s + 1) * classes];
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut z = T::zero();
        for &v in row {
            z += (v - max).exp();
        }
        let log_z = z.ln() + max;
        loss += log_z - row[label];
        for (j, &v) in row.iter().enumerate() {
            let p = (v - log_z).exp();
            let target = if j == label { T::one() } else { T::zero() };
            grad[s * classes + j] = (p - target) * inv_n;
        }
    }
    (loss * inv_n, grad)
}
