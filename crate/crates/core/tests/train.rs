//! Quantization-aware training and fine-tuning.

mod common;

use common::*;
use qprune::arch::NetBuilder;
use qprune::data::Dataset;
use qprune::engine::evaluate;
use qprune::pipeline::{default_rank_mode, prune_targets, rank_layer, Direction};
use qprune::quant::QuantScheme;
use qprune::surgery::{LayerKind, NetworkDef, PoolKind, Precision, Source};
use qprune::train::{finetune, he_init, train, TrainConfig};
use qprune::Error;
use rand::Rng;
use rand_distr::{Distribution, Normal};

fn cfg(lr0: f32, epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        lr0,
        epochs,
        seed,
        ..TrainConfig::default()
    }
}

fn conv_weights(net: &NetworkDef) -> Vec<Vec<f32>> {
    net.layers
        .iter()
        .filter_map(|l| l.kind.conv().map(|c| c.weights.data().to_vec()))
        .collect()
}

#[test]
fn zero_learning_rate_keeps_parameters() {
    let split = synth_split(200, 50, 1);
    let net = desk(QuantScheme::bnn(), true, 1);
    let (out, _) = train(&net, &split.train, None, &cfg(0.0, 2, 1)).unwrap();
    assert_eq!(conv_weights(&out), conv_weights(&net));
    for (a, b) in out.layers.iter().zip(&net.layers) {
        match (&a.kind, &b.kind) {
            (LayerKind::BatchNorm(x), LayerKind::BatchNorm(y)) => {
                assert_eq!((&x.gamma, &x.beta), (&y.gamma, &y.beta));
            }
            (LayerKind::Conv(x) | LayerKind::Fc(x), LayerKind::Conv(y) | LayerKind::Fc(y)) => {
                assert_eq!(x.bias, y.bias);
            }
            _ => {}
        }
    }
}

#[test]
fn masked_units_never_move() {
    let split = synth_split(300, 50, 2);
    let mut net = desk(QuantScheme::xnor(), true, 2);
    // Push some shadow weights outside the clipping range so clipping of dead
    // entries would show.
    for l in &mut net.layers {
        if let Some(c) = l.kind.conv_mut() {
            for w in c.weights.data_mut().iter_mut().step_by(7) {
                *w *= 20.0;
            }
        }
    }
    for t in prune_targets(&net, Direction::BottomUp) {
        let live = net.layers[t].live_outputs();
        net.apply_filter_prune_in_place(t, &live[..live.len() / 3]).unwrap();
    }
    let i = layer_index(&net, "conv3");
    net = net.apply_kernel_prune(i, &[(0, 1), (2, 2)]).unwrap();
    let (out, _) = train(&net, &split.train, None, &cfg(0.05, 2, 2)).unwrap();
    let mut moved_live = false;
    for (a, b) in out.layers.iter().zip(&net.layers) {
        assert_eq!(a.out_mask, b.out_mask);
        match (&a.kind, &b.kind) {
            (LayerKind::Conv(x) | LayerKind::Fc(x), LayerKind::Conv(y) | LayerKind::Fc(y)) => {
                let live = b.weight_live_mask().unwrap();
                for ((va, vb), l) in x.weights.data().iter().zip(y.weights.data()).zip(&live) {
                    if *l {
                        moved_live |= va != vb;
                    } else {
                        assert_eq!(va, vb, "dead weight of {} moved", b.name);
                    }
                }
                if let (Some(ba), Some(bb)) = (&x.bias, &y.bias) {
                    for (k, m) in b.out_mask.iter().enumerate() {
                        if !m {
                            assert_eq!(ba[k], bb[k], "dead bias of {}", b.name);
                        }
                    }
                }
            }
            (LayerKind::BatchNorm(x), LayerKind::BatchNorm(y)) => {
                for (k, m) in b.out_mask.iter().enumerate() {
                    if !m {
                        let a = (x.gamma[k], x.beta[k], x.mean[k], x.var[k]);
                        assert_eq!(a, (y.gamma[k], y.beta[k], y.mean[k], y.var[k]), "{}", b.name);
                    }
                }
            }
            _ => {}
        }
    }
    assert!(moved_live);
}

#[test]
fn binary_shadow_weights_stay_clipped() {
    let split = synth_split(300, 50, 3);
    let net = desk(QuantScheme::bnn(), false, 3);
    let (out, _) = train(&net, &split.train, None, &cfg(0.5, 2, 3)).unwrap();
    for l in &out.layers {
        if let Some(c) = l.kind.conv() {
            if c.precision.scheme().is_some() {
                assert!(c.weights.data().iter().all(|w| (-1.0..=1.0).contains(w)), "{}", l.name);
            }
        }
    }
}

/// Four Gaussian blobs around the corners of a square, one per class.
fn blobs(n: usize, seed: u64) -> Dataset {
    let mut r = rng(seed);
    let noise = Normal::new(0.0f32, 0.4).unwrap();
    let mut inputs = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let c = r.gen_range(0..4);
        let (cx, cy) = [(2.0, 2.0), (-2.0, 2.0), (-2.0, -2.0), (2.0, -2.0)][c];
        inputs.push(cx + noise.sample(&mut r));
        inputs.push(cy + noise.sample(&mut r));
        labels.push(c);
    }
    Dataset {
        sample_shape: [2, 1, 1],
        inputs,
        labels,
    }
}

/// Two binary-weight fully-connected layers; the second reads binarized
/// activations.
fn binary_mlp(seed: u64) -> NetworkDef {
    let s = QuantScheme::bnn();
    let mut b = NetBuilder::new([2, 1, 1]);
    let h = b
        .fc(
            "fc1",
            Source::Input,
            32,
            Precision::Quantized {
                scheme: s,
                quantize_input: false,
            },
            false,
        )
        .unwrap();
    let h = b.bn("bn1", h).unwrap();
    let o = b
        .fc(
            "fc2",
            h,
            4,
            Precision::Quantized {
                scheme: s,
                quantize_input: true,
            },
            false,
        )
        .unwrap();
    let o = b.bn("bn2", o).unwrap();
    b.softmax(o).unwrap();
    let mut net = b.finish().unwrap();
    he_init(&mut net, seed);
    net
}

const MLP_MIN_ACC: f64 = 95.0;
/// Within the 200-epoch budget; the rate is held constant.
const MLP_EPOCHS: usize = 30;

#[test]
fn binary_mlp_separates_blobs() {
    let mut accs = Vec::new();
    for seed in 0..5 {
        let data = blobs(400, seed);
        let c = TrainConfig {
            lr0: 0.01,
            epochs: MLP_EPOCHS,
            batch_size: 32,
            decay_every: MLP_EPOCHS,
            seed,
            ..TrainConfig::default()
        };
        let (net, _) = train(&binary_mlp(seed), &data, None, &c).unwrap();
        accs.push(evaluate(&net, &data, 0, seed).unwrap().accuracy_pct());
    }
    let mean = accs.iter().sum::<f64>() / accs.len() as f64;
    assert!(mean >= MLP_MIN_ACC, "{accs:?}");
}

#[test]
fn zero_epochs_is_identity() {
    let split = synth_split(100, 20, 4);
    let net = desk(QuantScheme::dorefa2(), false, 4);
    let (out, hist) = train(&net, &split.train, Some(&split.val), &cfg(0.05, 0, 4)).unwrap();
    assert_eq!(out, net);
    assert!(hist.epochs.is_empty());
    let ft = finetune(&net, &split.train, Some(&split.val), 0, &cfg(0.05, 5, 4)).unwrap();
    assert_eq!(ft.net, net);
}

#[test]
fn training_is_deterministic() {
    let split = synth_split(200, 50, 5);
    let net = desk(QuantScheme::xnor(), true, 5);
    let c = TrainConfig {
        hflip: true,
        ..cfg(0.05, 2, 5)
    };
    let a = train(&net, &split.train, Some(&split.val), &c).unwrap();
    let b = train(&net, &split.train, Some(&split.val), &c).unwrap();
    assert_eq!(a, b);
    let other = train(&net, &split.train, Some(&split.val), &TrainConfig { seed: 6, ..c }).unwrap();
    assert_ne!(a.0, other.0);
}

/// A small full-precision conv net.
fn float_net(seed: u64) -> NetworkDef {
    let mut b = NetBuilder::new([3, 32, 32]);
    let x = b
        .conv("conv1", Source::Input, 6, 3, 2, 1, Precision::Full, true)
        .unwrap();
    let x = b.bn("bn1", x).unwrap();
    let x = b.pool("gap", x, PoolKind::GlobalAvg, 0, 0).unwrap();
    let x = b.fc("fc", x, 10, Precision::Full, true).unwrap();
    b.softmax(x).unwrap();
    let mut net = b.finish().unwrap();
    he_init(&mut net, seed);
    net
}

#[test]
fn fixed_batch_loss_does_not_increase() {
    let data = synth_split(64, 1, 7).train;
    let c = TrainConfig {
        lr0: 1e-3,
        epochs: 10,
        batch_size: 64,
        momentum: 0.0,
        seed: 7,
        ..TrainConfig::default()
    };
    let (_, hist) = train(&float_net(7), &data, None, &c).unwrap();
    let losses: Vec<f64> = hist.epochs.iter().map(|e| e.train_loss).collect();
    assert_eq!(losses.len(), 10);
    for w in losses.windows(2) {
        assert!(w[1] <= w[0] + 1e-6, "{losses:?}");
    }
    assert!(losses[9] < losses[0]);
}

#[test]
fn divergence_returns_last_good_checkpoint() {
    let data = synth_split(64, 1, 8).train;
    let net = float_net(8);
    let c = TrainConfig {
        lr0: 1e30,
        epochs: 5,
        batch_size: 16,
        ..TrainConfig::default()
    };
    match train(&net, &data, None, &c) {
        Err(Error::Diverged { epoch, last_good }) => {
            if epoch == 0 {
                assert_eq!(*last_good, net);
            }
            last_good.validate().unwrap();
        }
        other => panic!("expected divergence, got {:?}", other.map(|_| ())),
    }
}

#[test]
fn schedules_decay_by_the_factor() {
    let c = cfg(0.005, 60, 0);
    assert_eq!(c.lr_at(0), 0.005);
    assert_eq!(c.lr_at(9), 0.005);
    assert!((c.lr_at(10) / 0.0005 - 1.0).abs() < 1e-6);
    let f = c.for_finetune(5);
    assert_eq!(f.lr_at(0), 0.005);
    assert!((f.lr_at(2) / 0.00005 - 1.0).abs() < 1e-6);
    assert!(cfg(-1.0, 1, 0).validate().is_err());
}

#[test]
fn finetune_keeps_the_best_validation_checkpoint() {
    let split = synth_split(400, 200, 9);
    let net = desk(QuantScheme::bnn(), false, 9);
    let ft = finetune(&net, &split.train, Some(&split.val), 3, &cfg(0.05, 0, 9)).unwrap();
    let best = ft
        .history
        .epochs
        .iter()
        .filter_map(|e| e.val_acc_pct)
        .fold(f64::MIN, f64::max);
    assert_eq!(ft.best_val_acc_pct, Some(best));
    assert_eq!(evaluate(&ft.net, &split.val, 0, 9).unwrap().accuracy_pct(), best);
}

const RECOVERY_SEEDS: u64 = 5;
const RECOVERY_MIN_FRACTION: f64 = 0.5;
const RECOVERY_PRUNE_RATIO: f64 = 0.10;

/// Prunes the worst-ranked 10% of every prunable layer at once.
fn prune_ten_percent(net: &NetworkDef) -> NetworkDef {
    let mut out = net.clone();
    for t in prune_targets(net, Direction::BottomUp) {
        let rank = rank_layer(&out, t, default_rank_mode(&out, t), Default::default()).unwrap();
        let live = out.layers[t].live_outputs().len();
        let count = ((RECOVERY_PRUNE_RATIO * live as f64).ceil() as usize).min(live - 1);
        out.apply_filter_prune_in_place(t, &rank.top_filters(count)).unwrap();
    }
    out
}

#[test]
fn finetune_recovers_most_of_a_ten_percent_prune() {
    let (mut drop, mut recovered) = (0.0, 0.0);
    for seed in 0..RECOVERY_SEEDS {
        let split = synth_split(2000, 500, 100 + seed);
        let c = cfg(0.05, 8, seed);
        let (net, _) = train(
            &desk(QuantScheme::bnn(), false, seed),
            &split.train,
            Some(&split.val),
            &c,
        )
        .unwrap();
        let acc = |n: &NetworkDef| evaluate(n, &split.val, 0, seed).unwrap().accuracy_pct();
        let before = acc(&net);
        let pruned = prune_ten_percent(&net);
        let after_prune = acc(&pruned);
        let ft = finetune(&pruned, &split.train, Some(&split.val), 5, &c).unwrap();
        let after_ft = acc(&ft.net);
        println!("seed {seed}: {before:.1}% -> pruned {after_prune:.1}% -> fine-tuned {after_ft:.1}%");
        drop += before - after_prune;
        recovered += after_ft - after_prune;
    }
    assert!(drop > 0.0, "pruning did not cost accuracy");
    assert!(
        recovered / drop >= RECOVERY_MIN_FRACTION,
        "recovered {recovered:.1} of {drop:.1} points"
    );
}
