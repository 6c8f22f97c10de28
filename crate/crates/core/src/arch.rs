//! Network builders: the desk-scale CNNs used for experiments and the
//! ResNet-18 layer description used for size accounting.

use crate::error::{Error, Result};
use crate::quant::QuantScheme;
use crate::surgery::{BatchNorm, ConvLayer, Layer, LayerKind, NetworkDef, PoolKind, Precision, Source};
use crate::tensor::TensorF;
use crate::train::he_init;

/// Appends layers while tracking output shapes.
#[derive(Debug, Clone)]
pub struct NetBuilder {
    net: NetworkDef,
    shapes: Vec<[usize; 3]>,
}

impl NetBuilder {
    pub fn new(input_shape: [usize; 3]) -> Self {
        Self {
            net: NetworkDef::new(input_shape),
            shapes: Vec::new(),
        }
    }

    pub fn shape(&self, src: Source) -> [usize; 3] {
        match src {
            Source::Input => self.net.input_shape,
            Source::Layer(i) => self.shapes[i],
        }
    }

    pub fn last(&self) -> Source {
        match self.shapes.len() {
            0 => Source::Input,
            n => Source::Layer(n - 1),
        }
    }

    fn push(&mut self, name: &str, kind: LayerKind, inputs: Vec<Source>) -> Result<Source> {
        let c = self.shape(inputs[0])[0];
        self.net.layers.push(Layer::new(name, kind, inputs, c));
        self.shapes = self.net.output_shapes()?;
        Ok(self.last())
    }

    #[allow(clippy::too_many_arguments)]
    pub fn conv(
        &mut self,
        name: &str,
        src: Source,
        filters: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        precision: Precision,
        bias: bool,
    ) -> Result<Source> {
        let c = self.shape(src)[0];
        let conv = ConvLayer {
            weights: TensorF::zeros(vec![filters, c, kernel, kernel]),
            bias: bias.then(|| vec![0.0; filters]),
            stride,
            padding,
            precision,
        };
        self.push(name, LayerKind::Conv(conv), vec![src])
    }

    pub fn fc(&mut self, name: &str, src: Source, outputs: usize, precision: Precision, bias: bool) -> Result<Source> {
        let [c, h, w] = self.shape(src);
        let conv = ConvLayer {
            weights: TensorF::zeros(vec![outputs, c, h, w]),
            bias: bias.then(|| vec![0.0; outputs]),
            stride: 1,
            padding: 0,
            precision,
        };
        self.push(name, LayerKind::Fc(conv), vec![src])
    }

    pub fn bn(&mut self, name: &str, src: Source) -> Result<Source> {
        let c = self.shape(src)[0];
        self.push(name, LayerKind::BatchNorm(BatchNorm::identity(c)), vec![src])
    }

    pub fn prelu(&mut self, name: &str, src: Source) -> Result<Source> {
        let c = self.shape(src)[0];
        self.push(name, LayerKind::PRelu(vec![0.25; c]), vec![src])
    }

    pub fn pool(&mut self, name: &str, src: Source, kind: PoolKind, size: usize, stride: usize) -> Result<Source> {
        self.push(name, LayerKind::Pool { kind, size, stride }, vec![src])
    }

    pub fn add(&mut self, name: &str, a: Source, b: Source) -> Result<Source> {
        self.push(name, LayerKind::ResidualAdd, vec![a, b])
    }

    pub fn softmax(&mut self, src: Source) -> Result<Source> {
        self.push("softmax", LayerKind::Softmax, vec![src])
    }

    pub fn finish(self) -> Result<NetworkDef> {
        self.net.validate()?;
        Ok(self.net)
    }
}

fn binary_layer(scheme: QuantScheme) -> Precision {
    Precision::Quantized {
        scheme,
        quantize_input: true,
    }
}

/// Precision of the first layer: full unless the scheme is fully binarized,
/// in which case weights are quantized but the pixels are not.
fn first_layer(scheme: QuantScheme) -> Precision {
    if scheme.fully_binarized {
        Precision::Quantized {
            scheme,
            quantize_input: false,
        }
    } else {
        Precision::Full
    }
}

fn last_layer(scheme: QuantScheme) -> Precision {
    if scheme.fully_binarized {
        binary_layer(scheme)
    } else {
        Precision::Full
    }
}

/// Classifier head: fc, plus a batch-norm before the softmax when the fc is
/// quantized.
fn head(b: &mut NetBuilder, src: Source, classes: usize, scheme: QuantScheme) -> Result<()> {
    let fc = b.fc("fc", src, classes, last_layer(scheme), true)?;
    let logits = if scheme.fully_binarized { b.bn("fc_bn", fc)? } else { fc };
    b.softmax(logits)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeskCnnConfig {
    pub input_shape: [usize; 3],
    /// Filters of the four conv layers.
    pub widths: [usize; 4],
    pub classes: usize,
    pub scheme: QuantScheme,
    /// Adds an identity shortcut around the third conv (needs
    /// `widths[1] == widths[2]`).
    pub residual: bool,
}

impl Default for DeskCnnConfig {
    fn default() -> Self {
        Self {
            input_shape: [3, 32, 32],
            widths: [8, 16, 16, 32],
            classes: 10,
            scheme: QuantScheme::bnn(),
            residual: false,
        }
    }
}

/// Four conv layers with batch-norm, two max-pools, global average pooling
/// and an fc classifier. The first conv has stride 2; middle layers are
/// quantized with binarized inputs. He-initialized from `seed`.
pub fn desk_cnn(cfg: &DeskCnnConfig, seed: u64) -> Result<NetworkDef> {
    let [w1, w2, w3, w4] = cfg.widths;
    let s = cfg.scheme;
    let mut b = NetBuilder::new(cfg.input_shape);
    let x = b.conv("conv1", Source::Input, w1, 3, 2, 1, first_layer(s), false)?;
    let x = b.bn("bn1", x)?;
    let x = b.conv("conv2", x, w2, 3, 1, 1, binary_layer(s), false)?;
    let x = b.bn("bn2", x)?;
    let p = b.pool("pool2", x, PoolKind::Max, 2, 2)?;
    let x = b.conv("conv3", p, w3, 3, 1, 1, binary_layer(s), false)?;
    let mut x = b.bn("bn3", x)?;
    if cfg.residual {
        x = b.add("add3", p, x)?;
    }
    let x = b.pool("pool3", x, PoolKind::Max, 2, 2)?;
    let x = b.conv("conv4", x, w4, 3, 1, 1, binary_layer(s), false)?;
    let x = b.bn("bn4", x)?;
    let x = b.pool("gap", x, PoolKind::GlobalAvg, 0, 0)?;
    head(&mut b, x, cfg.classes, s)?;
    let mut net = b.finish()?;
    he_init(&mut net, seed);
    Ok(net)
}

/// Named architectures: `resnet18-<scheme>`, `resnet18-<scheme>-prelu`
/// (zero weights, 1000 classes) and `desk-<scheme>` (He-initialized with
/// seed 0).
pub fn builtin(name: &str) -> Result<NetworkDef> {
    if let Some(rest) = name.strip_prefix("resnet18-") {
        let (scheme, prelu) = match rest.strip_suffix("-prelu") {
            Some(s) => (s, true),
            None => (rest, false),
        };
        return resnet18(scheme.parse()?, prelu, 1000);
    }
    if let Some(scheme) = name.strip_prefix("desk-") {
        let cfg = DeskCnnConfig {
            scheme: scheme.parse()?,
            ..DeskCnnConfig::default()
        };
        return desk_cnn(&cfg, 0);
    }
    Err(Error::Config(format!("unknown builtin model {name:?}")))
}

/// ResNet-18 for 224×224 inputs with the layer names of the Xnor-Net size
/// table: `conv1`…`conv17` for the 3×3/7×7 convolutions, `residual1`…`residual3`
/// for the 1×1 downsample shortcuts and `fc`. Weights are zero; the result
/// is meant for accounting and shape checks.
pub fn resnet18(scheme: QuantScheme, prelu: bool, classes: usize) -> Result<NetworkDef> {
    let mut b = NetBuilder::new([3, 224, 224]);
    let q = binary_layer(scheme);
    let x = b.conv("conv1", Source::Input, 64, 7, 2, 3, first_layer(scheme), false)?;
    let mut x = b.bn("conv1_bn", x)?;
    if prelu {
        x = b.prelu("conv1_prelu", x)?;
    }
    // No pooling padding here, so the stem gives 55×55 maps instead of
    // 56×56. Parameter counts do not depend on it.
    let mut x = b.pool("maxpool", x, PoolKind::Max, 3, 2)?;
    let mut conv_idx = 2;
    let mut res_idx = 1;
    for (stage, width) in [64usize, 128, 256, 512].into_iter().enumerate() {
        for block in 0..2 {
            let downsample = stage > 0 && block == 0;
            let stride = if downsample { 2 } else { 1 };
            let shortcut_in = x;
            let a = b.conv(&format!("conv{conv_idx}"), x, width, 3, stride, 1, q, false)?;
            let mut a = b.bn(&format!("conv{conv_idx}_bn"), a)?;
            if prelu {
                a = b.prelu(&format!("conv{conv_idx}_prelu"), a)?;
            }
            conv_idx += 1;
            let c = b.conv(&format!("conv{conv_idx}"), a, width, 3, 1, 1, q, false)?;
            let c = b.bn(&format!("conv{conv_idx}_bn"), c)?;
            conv_idx += 1;
            let shortcut = if downsample {
                let name = format!("residual{res_idx}");
                res_idx += 1;
                let d = b.conv(&name, shortcut_in, width, 1, 2, 0, q, false)?;
                b.bn(&format!("{name}_bn"), d)?
            } else {
                shortcut_in
            };
            x = b.add(&format!("add{}", conv_idx - 1), shortcut, c)?;
            if prelu {
                x = b.prelu(&format!("add{}_prelu", conv_idx - 1), x)?;
            }
        }
    }
    let x = b.pool("avgpool", x, PoolKind::GlobalAvg, 0, 0)?;
    head(&mut b, x, classes, scheme)?;
    b.finish()
}
