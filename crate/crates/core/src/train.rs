//! Quantization-aware training on shadow weights.
//!
//! The network keeps full-precision weights; every step quantizes them,
//! runs forward/backward on the quantized values and maps the gradient back
//! through the straight-through estimator. Masked units get zero gradient and
//! never move.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::data::Dataset;
use crate::engine::{backward, evaluate, forward, softmax_cross_entropy, Mode, PreparedNet};
use crate::error::{Error, Result};
use crate::quant::weight_ste;
use crate::surgery::{BatchNorm, LayerKind, NetworkDef};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr0: f32,
    pub lr_decay_factor: f32,
    /// Epochs between learning-rate decays.
    pub decay_every: usize,
    pub epochs: usize,
    pub momentum: f32,
    pub batch_size: usize,
    pub seed: u64,
    /// Random horizontal flips of training samples.
    pub hflip: bool,
    /// Momentum of the batch-norm running statistics.
    pub bn_momentum: f32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 0.005,
            lr_decay_factor: 10.0,
            decay_every: 10,
            epochs: 20,
            momentum: 0.9,
            batch_size: 64,
            seed: 0,
            hflip: false,
            bn_momentum: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 >= 0.0 && self.lr0.is_finite()) {
            return Err(Error::Config(format!("lr0 must be ≥ 0, got {}", self.lr0)));
        }
        if self.lr_decay_factor <= 0.0 || self.decay_every == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "lr_decay_factor, decay_every and batch_size must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f32 {
        self.lr0 / self.lr_decay_factor.powi((epoch / self.decay_every) as i32)
    }

    /// The fine-tuning schedule: same start, decaying every epoch.
    pub fn for_finetune(&self, epochs: usize) -> Self {
        Self {
            epochs,
            decay_every: 1,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f32,
    pub train_loss: f64,
    pub train_acc_pct: f64,
    pub val_acc_pct: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn best_val_acc(&self) -> Option<f64> {
        self.epochs
            .iter()
            .filter_map(|e| e.val_acc_pct)
            .fold(None, |m, v| Some(m.map_or(v, |m: f64| m.max(v))))
    }
}

/// He (fan-in) initialization of conv/fc shadow weights; biases, batch-norm
/// and PReLU parameters are reset.
pub fn he_init(net: &mut NetworkDef, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for layer in &mut net.layers {
        match &mut layer.kind {
            LayerKind::Conv(c) | LayerKind::Fc(c) => {
                let fan_in = c.weights.filter_len().max(1);
                let normal = Normal::new(0.0f32, (2.0 / fan_in as f32).sqrt()).expect("positive std");
                for v in c.weights.data_mut() {
                    *v = normal.sample(&mut rng);
                }
                if let Some(b) = &mut c.bias {
                    b.fill(0.0);
                }
            }
            LayerKind::BatchNorm(bn) => *bn = BatchNorm::identity(bn.gamma.len()),
            LayerKind::PRelu(s) => s.fill(0.25),
            _ => {}
        }
    }
}

#[derive(Debug, Clone, Default)]
struct Velocity {
    w: Vec<f32>,
    b: Vec<f32>,
    gamma: Vec<f32>,
    beta: Vec<f32>,
    slopes: Vec<f32>,
}

fn sgd(p: &mut [f32], g: &[f32], v: &mut Vec<f32>, lr: f32, momentum: f32) {
    if g.is_empty() {
        return;
    }
    if v.len() != p.len() {
        *v = vec![0.0; p.len()];
    }
    for ((p, &g), v) in p.iter_mut().zip(g).zip(v.iter_mut()) {
        *v = momentum * *v + g;
        *p -= lr * *v;
    }
}

fn flip_horizontal(x: &mut [f32], w: usize) {
    for row in x.chunks_exact_mut(w) {
        row.reverse();
    }
}

struct StepOutcome {
    loss: f64,
    correct: usize,
}

fn train_step(
    net: &mut NetworkDef,
    vel: &mut [Velocity],
    x: &[f32],
    labels: &[usize],
    lr: f32,
    cfg: &TrainConfig,
) -> Result<StepOutcome> {
    let prepared = PreparedNet::<f32>::new(net, false)?;
    let cache = forward(&prepared, x, labels.len(), Mode::Train)?;
    let classes = prepared.num_classes();
    let logits = cache.logits(&prepared);
    let (loss, d_logits) = softmax_cross_entropy(logits, labels, classes);
    if !loss.is_finite() {
        return Err(Error::NonFinite("training loss"));
    }
    let correct = logits
        .chunks_exact(classes)
        .zip(labels)
        .filter(|(row, &l)| {
            let best = row
                .iter()
                .enumerate()
                .fold(0, |b, (j, &v)| if v > row[b] { j } else { b });
            best == l
        })
        .count();
    let grads = backward(&prepared, &cache, x, &d_logits)?;
    for (i, layer) in net.layers.iter_mut().enumerate() {
        let g = &grads[i];
        let v = &mut vel[i];
        let live = layer.weight_live_mask();
        let out_mask = layer.out_mask.clone();
        match &mut layer.kind {
            LayerKind::Conv(c) | LayerKind::Fc(c) => {
                if g.weights.is_empty() {
                    continue;
                }
                let live = live.expect("conv layer");
                let shadow_grad = match c.precision.scheme() {
                    Some(s) => weight_ste(&g.weights, &c.weights, s, Some(&live)),
                    None => g
                        .weights
                        .iter()
                        .zip(&live)
                        .map(|(&d, &l)| if l { d } else { 0.0 })
                        .collect(),
                };
                sgd(c.weights.data_mut(), &shadow_grad, &mut v.w, lr, cfg.momentum);
                if c.precision.scheme().is_some_and(|s| s.binary_weights()) {
                    for (w, _) in c.weights.data_mut().iter_mut().zip(&live).filter(|(_, &l)| l) {
                        *w = w.clamp(-1.0, 1.0);
                    }
                }
                if let Some(b) = &mut c.bias {
                    sgd(b, &g.bias, &mut v.b, lr, cfg.momentum);
                }
            }
            LayerKind::BatchNorm(bn) => {
                sgd(&mut bn.gamma, &g.gamma, &mut v.gamma, lr, cfg.momentum);
                sgd(&mut bn.beta, &g.beta, &mut v.beta, lr, cfg.momentum);
                if let Some(st) = &cache.bn_stats[i] {
                    let m = cfg.bn_momentum;
                    let unbias = st.count as f32 / (st.count.max(2) - 1) as f32;
                    let live = out_mask.iter().enumerate().filter(|(_, &l)| l).map(|(ch, _)| ch);
                    for ch in live {
                        bn.mean[ch] = (1.0 - m) * bn.mean[ch] + m * st.mean[ch];
                        bn.var[ch] = (1.0 - m) * bn.var[ch] + m * st.var[ch] * unbias;
                    }
                }
            }
            LayerKind::PRelu(s) => sgd(s, &g.slopes, &mut v.slopes, lr, cfg.momentum),
            _ => {}
        }
    }
    Ok(StepOutcome {
        loss: loss as f64,
        correct,
    })
}

/// Trains for `cfg.epochs` epochs. Validation accuracy is recorded after
/// every epoch when `val` is given.
pub fn train(
    net: &NetworkDef,
    data: &Dataset,
    val: Option<&Dataset>,
    cfg: &TrainConfig,
) -> Result<(NetworkDef, TrainHistory)> {
    run(net, data, val, cfg, false)
}

/// Outcome of [`finetune`]: the checkpoint with the best validation accuracy
/// (the last one without validation data).
#[derive(Debug, Clone, PartialEq)]
pub struct Finetuned {
    pub net: NetworkDef,
    pub best_val_acc_pct: Option<f64>,
    pub history: TrainHistory,
}

/// Fine-tunes for `epochs` epochs with the learning rate decaying every epoch.
/// `epochs == 0` returns the network unchanged.
pub fn finetune(
    net: &NetworkDef,
    data: &Dataset,
    val: Option<&Dataset>,
    epochs: usize,
    cfg: &TrainConfig,
) -> Result<Finetuned> {
    if epochs == 0 {
        return Ok(Finetuned {
            net: net.clone(),
            best_val_acc_pct: None,
            history: TrainHistory::default(),
        });
    }
    let (net, history) = run(net, data, val, &cfg.for_finetune(epochs), true)?;
    Ok(Finetuned {
        net,
        best_val_acc_pct: history.best_val_acc(),
        history,
    })
}

fn run(
    net: &NetworkDef,
    data: &Dataset,
    val: Option<&Dataset>,
    cfg: &TrainConfig,
    keep_best: bool,
) -> Result<(NetworkDef, TrainHistory)> {
    cfg.validate()?;
    net.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut net = net.clone();
    let mut best: Option<(f64, NetworkDef)> = None;
    let mut vel = vec![Velocity::default(); net.layers.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut history = TrainHistory::default();
    let sl = data.sample_len();
    let w = data.sample_shape[2];
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..cfg.epochs {
        let last_good = net.clone();
        let lr = cfg.lr_at(epoch);
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0f64, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let mut x = Vec::with_capacity(chunk.len() * sl);
            for &i in chunk {
                let start = x.len();
                x.extend_from_slice(data.sample(i));
                if cfg.hflip && rand::Rng::gen_bool(&mut rng, 0.5) {
                    flip_horizontal(&mut x[start..], w);
                }
            }
            let labels: Vec<usize> = chunk.iter().map(|&i| data.labels[i]).collect();
            match train_step(&mut net, &mut vel, &x, &labels, lr, cfg) {
                Ok(s) => {
                    loss_sum += s.loss * chunk.len() as f64;
                    correct += s.correct;
                }
                Err(Error::NonFinite(_)) => {
                    return Err(Error::Diverged {
                        epoch,
                        last_good: Box::new(last_good),
                    })
                }
                Err(e) => return Err(e),
            }
        }
        let val_acc_pct = match val {
            Some(v) => Some(evaluate(&net, v, 0, cfg.seed)?.accuracy_pct()),
            None => None,
        };
        if keep_best {
            if let Some(acc) = val_acc_pct {
                if best.as_ref().is_none_or(|(b, _)| acc > *b) {
                    best = Some((acc, net.clone()));
                }
            }
        }
        history.epochs.push(EpochRecord {
            epoch,
            lr,
            train_loss: loss_sum / data.len() as f64,
            train_acc_pct: 100.0 * correct as f64 / data.len() as f64,
            val_acc_pct,
        });
    }
    Ok((best.map_or(net, |(_, n)| n), history))
}
