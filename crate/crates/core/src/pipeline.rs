//! Layer-wise pruning driver, run configuration and reports.
//!
//! For every prunable channel space (in bottom-up or top-down order) the
//! driver ranks the filters, searches a pruning ratio with the GP optimizer
//! on a calibration subset, applies the mask and fine-tunes when the layer
//! lost more than the trigger fraction of its filters. A final fine-tune
//! follows once all layers are done.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::Serialize;

use crate::arch::DeskCnnConfig;
use crate::bayesopt::{optimize_layer_ratio, prune_count, BoConfig, BoTrace, SizeBaseline};
use crate::data::{DataSplit, Normalization};
use crate::engine::evaluate;
use crate::error::{Error, Result};
use crate::metrics::DistanceKind;
use crate::ranking::{rank_filters_interaction_multi, rank_filters_own, rank_kernels, Consumer, RankResult};
use crate::surgery::{format_kilo, format_mib, NetworkDef, Source, BITS_PER_MIB};
use crate::train::{finetune, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Direction {
    #[default]
    BottomUp,
    TopDown,
}

impl FromStr for Direction {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "up" | "bottom-up" => Ok(Direction::BottomUp),
            "down" | "top-down" => Ok(Direction::TopDown),
            other => Err(Error::Config(format!("unknown direction {other:?} (up|down)"))),
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::BottomUp => "up",
            Direction::TopDown => "down",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RankMode {
    Kernel,
    FilterOwn,
    FilterInteraction,
}

impl FromStr for RankMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "kernel" => Ok(RankMode::Kernel),
            "filter-own" => Ok(RankMode::FilterOwn),
            "filter-interaction" => Ok(RankMode::FilterInteraction),
            other => Err(Error::Config(format!(
                "unknown rank mode {other:?} (kernel|filter-own|filter-interaction)"
            ))),
        }
    }
}

impl fmt::Display for RankMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RankMode::Kernel => "kernel",
            RankMode::FilterOwn => "filter-own",
            RankMode::FilterInteraction => "filter-interaction",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PruneRunConfig {
    pub direction: Direction,
    pub metric: DistanceKind,
    /// Fine-tune after a layer loses more than this percentage of its filters.
    pub finetune_trigger_pct: f64,
    pub finetune_epochs: usize,
    pub final_finetune_epochs: usize,
    pub bo: BoConfig,
    pub train: TrainConfig,
    /// Training samples used to score candidate ratios.
    pub calib_size: usize,
    pub seed: u64,
    /// Timed passes for the latency measurement.
    pub eval_passes: usize,
}

impl Default for PruneRunConfig {
    fn default() -> Self {
        Self {
            direction: Direction::BottomUp,
            metric: DistanceKind::Angle,
            finetune_trigger_pct: 5.0,
            finetune_epochs: 5,
            final_finetune_epochs: 10,
            bo: BoConfig::default(),
            train: TrainConfig::default(),
            calib_size: 500,
            seed: 0,
            eval_passes: 10,
        }
    }
}

impl PruneRunConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.finetune_trigger_pct > 0.0 && self.finetune_trigger_pct <= 100.0) {
            return Err(Error::Config("finetune_trigger_pct must be in (0, 100]".into()));
        }
        if self.calib_size == 0 {
            return Err(Error::Config("calib_size must be positive".into()));
        }
        self.bo.validate()?;
        self.train.validate()
    }
}

/// The last conv/fc layer, treated as the classifier.
fn classifier(net: &NetworkDef) -> Option<usize> {
    (0..net.layers.len())
        .rev()
        .find(|&i| net.layers[i].kind.conv().is_some())
}

/// Ranking used by the pipeline: interaction-based, except for layers whose
/// output feeds the classifier, which are ranked on their own weights.
pub fn default_rank_mode(net: &NetworkDef, layer: usize) -> RankMode {
    let spaces = net.channel_spaces();
    let consumers = net.consumers(&spaces, spaces.output_space(layer));
    if consumers.is_empty() || consumers.iter().any(|&c| Some(c) == classifier(net)) {
        RankMode::FilterOwn
    } else {
        RankMode::FilterInteraction
    }
}

/// Ranks the live units of a conv/fc layer. Scores are computed on the live
/// sub-tensors; unit ids refer to the original filter and channel indices.
/// Filter modes cover every producer sharing the layer's channel space.
pub fn rank_layer(net: &NetworkDef, layer: usize, mode: RankMode, metric: DistanceKind) -> Result<RankResult> {
    let l = net.layers.get(layer).ok_or(Error::Index {
        index: layer,
        extent: net.layers.len(),
    })?;
    let conv = l.kind.conv().ok_or_else(|| Error::Layer {
        layer,
        msg: "ranking needs a conv/fc layer".into(),
    })?;
    let outs = l.live_outputs();
    let spaces = net.channel_spaces();
    let space = spaces.output_space(layer);
    match mode {
        RankMode::Kernel => {
            let (w, outs, ins) = net.live_weights(layer)?;
            Ok(rank_kernels(layer, &w, conv.precision.scheme(), metric)?.remap(&outs, &ins))
        }
        RankMode::FilterOwn => {
            let producers = net.producers(&spaces, space);
            let mut scores = vec![0.0; outs.len()];
            for &p in &producers {
                let (w, _, _) = net.live_weights(p)?;
                let scheme = net.layers[p].kind.conv().and_then(|c| c.precision.scheme());
                let r = rank_filters_own(p, &w, scheme, metric)?;
                for (s, v) in scores.iter_mut().zip(&r.scores) {
                    *s += v / producers.len() as f64;
                }
            }
            let units = (0..outs.len()).map(crate::ranking::RankUnit::Filter).collect();
            Ok(RankResult::from_scores(layer, units, scores).remap(&outs, &[]))
        }
        RankMode::FilterInteraction => {
            let consumers = net.consumers(&spaces, space);
            if consumers.is_empty() {
                return Err(Error::Layer {
                    layer,
                    msg: "no consuming layer for interaction ranking".into(),
                });
            }
            let mut gathered = Vec::with_capacity(consumers.len());
            for &c in &consumers {
                let (w, c_outs, c_ins) = net.live_weights(c)?;
                let cl = &net.layers[c];
                let c_ext = cl.in_mask.len();
                let kernel_live: Vec<bool> = c_outs
                    .iter()
                    .flat_map(|&j| c_ins.iter().map(move |&k| (j, k)))
                    .map(|(j, k)| cl.kernel_mask[j * c_ext + k])
                    .collect();
                gathered.push((w, cl.kind.conv().and_then(|x| x.precision.scheme()), kernel_live));
            }
            let cons: Vec<Consumer<'_>> = gathered
                .iter()
                .map(|(w, s, kl)| Consumer {
                    weights: w,
                    scheme: *s,
                    kernel_live: Some(kl),
                })
                .collect();
            Ok(rank_filters_interaction_multi(layer, &cons, metric)?.remap(&outs, &[]))
        }
    }
}

/// Representative layer (first producer) of every channel space that can
/// lose filters, in the requested order.
pub fn prune_targets(net: &NetworkDef, direction: Direction) -> Vec<usize> {
    let spaces = net.channel_spaces();
    let logits = net.logits_layer().map(|i| spaces.output_space(i));
    let input = spaces.space_of(Source::Input);
    let mut seen = BTreeSet::new();
    let mut targets = Vec::new();
    for (i, l) in net.layers.iter().enumerate() {
        if l.kind.conv().is_none() {
            continue;
        }
        let s = spaces.output_space(i);
        if seen.insert(s) && s != input && Some(s) != logits {
            targets.push(i);
        }
    }
    if direction == Direction::TopDown {
        targets.reverse();
    }
    targets
}

/// What happened to one channel space.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerStep {
    pub layer: usize,
    pub name: String,
    pub rank_mode: RankMode,
    pub live_before: usize,
    pub pruned: usize,
    pub ratio: f64,
    pub finetuned: bool,
    pub trace: BoTrace,
}

/// One conv/fc row of the per-layer table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerRow {
    pub layer: usize,
    pub name: String,
    pub kind: String,
    pub scheme: String,
    pub params_before: u64,
    pub params_after: u64,
    pub size_mib_before: f64,
    pub size_mib_after: f64,
    pub filters: u64,
    pub live_filters: u64,
    pub pruned_ratio_pct: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PruneReport {
    pub original_acc_pct: f64,
    /// Validation accuracy right after the last layer was pruned, before the
    /// final fine-tune.
    pub pruned_acc_pct: f64,
    /// Best validation accuracy of the final fine-tune.
    pub retrain_acc_pct: f64,
    pub bits_before: u64,
    pub bits_after: u64,
    pub params_before: u64,
    pub params_after: u64,
    /// `100·(1 − bits_after / bits_before)`.
    pub pruned_ratio_pct: f64,
    pub memory_mib: f64,
    pub original_memory_mib: f64,
    /// Median latency of the shrunk original over the shrunk pruned network.
    pub speedup: f64,
    pub layers: Vec<LayerRow>,
    pub steps: Vec<LayerStep>,
}

impl PruneReport {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for row in &self.layers {
            w.serialize(row)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Table-style text: per-layer parameters, size and pruned ratio, then
    /// the network summary.
    pub fn render(&self) -> String {
        let mut s = format!("{:<10} {:>10} {:>9} {:>9}\n", "layer", "params", "size_MiB", "ratio_%");
        for r in &self.layers {
            s += &format!(
                "{:<10} {:>10} {:>9} {:>9.2}\n",
                r.name,
                format_kilo(r.params_before),
                format_mib(r.size_mib_before),
                r.pruned_ratio_pct
            );
        }
        s += &format!(
            "original acc {:.2}%  pruned acc {:.2}%  retrained acc {:.2}%\n\
             pruned {:.2}% of bits ({} -> {} MiB)  speedup {:.2}x\n",
            self.original_acc_pct,
            self.pruned_acc_pct,
            self.retrain_acc_pct,
            self.pruned_ratio_pct,
            format_mib(self.original_memory_mib),
            format_mib(self.memory_mib),
            self.speedup
        );
        s
    }
}

fn layer_rows(before: &NetworkDef, after: &NetworkDef) -> Vec<LayerRow> {
    let (a, b) = (before.account(), after.account());
    a.layers
        .iter()
        .zip(&b.layers)
        .filter(|(x, _)| x.kind == "conv" || x.kind == "fc")
        .map(|(x, y)| LayerRow {
            layer: x.layer,
            name: x.name.clone(),
            kind: x.kind.to_string(),
            scheme: x.scheme.to_string(),
            params_before: x.params,
            params_after: y.params,
            size_mib_before: x.size_mib(),
            size_mib_after: y.size_mib(),
            filters: y.filters,
            live_filters: y.live_filters,
            pruned_ratio_pct: y.pruned_ratio_pct(),
        })
        .collect()
}

fn median_latency(net: &NetworkDef, split: &DataSplit, passes: usize, seed: u64) -> Result<f64> {
    if passes == 0 {
        return Ok(0.0);
    }
    Ok(evaluate(&net.shrink()?, &split.val, passes, seed)?.latency.median_s)
}

/// Runs the full pruning procedure on a trained network.
pub fn prune_network(net: &NetworkDef, split: &DataSplit, cfg: &PruneRunConfig) -> Result<(NetworkDef, PruneReport)> {
    cfg.validate()?;
    net.validate()?;
    let original = net.clone();
    let original_acc_pct = evaluate(net, &split.val, 0, cfg.seed)?.accuracy_pct();
    let baseline = SizeBaseline::of(net);
    let calib = split.train.sample_subset(cfg.calib_size, cfg.seed);
    let mut net = net.clone();
    let mut steps = Vec::new();

    // With α₁ = 0 no ratio can lower the loss below the unpruned error, so
    // the search is skipped and the network is returned as is.
    if cfg.bo.alpha1 > 0.0 {
        for layer in prune_targets(&net, cfg.direction) {
            let checkpoint = net.clone();
            let abort = |e: Error| Error::Aborted {
                layer,
                source: Box::new(e),
                checkpoint: Box::new(checkpoint.clone()),
            };
            if !net.is_filter_prunable(layer) {
                continue;
            }
            let mode = default_rank_mode(&net, layer);
            let rank = rank_layer(&net, layer, mode, cfg.metric).map_err(abort)?;
            let order = rank.top_filters(rank.units.len());
            let seed = cfg.seed.wrapping_add(layer as u64);
            let (ratio, trace) =
                optimize_layer_ratio(&net, layer, &order, &calib, baseline, &cfg.bo, seed).map_err(abort)?;
            let live_before = order.len();
            let count = prune_count(ratio, live_before);
            let mut finetuned = false;
            if count > 0 {
                net.apply_filter_prune_in_place(layer, &order[..count]).map_err(abort)?;
                if 100.0 * count as f64 / live_before as f64 > cfg.finetune_trigger_pct {
                    let tcfg = TrainConfig {
                        seed: cfg.train.seed.wrapping_add(1 + layer as u64),
                        ..cfg.train.clone()
                    };
                    net = finetune(&net, &split.train, Some(&split.val), cfg.finetune_epochs, &tcfg)
                        .map_err(abort)?
                        .net;
                    finetuned = cfg.finetune_epochs > 0;
                }
            }
            steps.push(LayerStep {
                layer,
                name: net.layers[layer].name.clone(),
                rank_mode: mode,
                live_before,
                pruned: count,
                ratio,
                finetuned,
                trace,
            });
        }
    }

    let any_pruned = steps.iter().any(|s| s.pruned > 0);
    let pruned_acc_pct = if any_pruned {
        evaluate(&net, &split.val, 0, cfg.seed)?.accuracy_pct()
    } else {
        original_acc_pct
    };
    let retrain_acc_pct = if any_pruned && cfg.final_finetune_epochs > 0 {
        let tcfg = TrainConfig {
            seed: cfg.train.seed.wrapping_add(10_000),
            ..cfg.train.clone()
        };
        let ft = finetune(&net, &split.train, Some(&split.val), cfg.final_finetune_epochs, &tcfg)?;
        net = ft.net;
        ft.best_val_acc_pct.unwrap_or(pruned_acc_pct)
    } else {
        pruned_acc_pct
    };

    let (before, after) = (original.account(), net.account());
    let speedup = if any_pruned && cfg.eval_passes > 0 {
        median_latency(&original, split, cfg.eval_passes, cfg.seed)?
            / median_latency(&net, split, cfg.eval_passes, cfg.seed)?
    } else {
        1.0
    };
    let report = PruneReport {
        original_acc_pct,
        pruned_acc_pct,
        retrain_acc_pct,
        bits_before: before.total_bits(),
        bits_after: after.total_bits(),
        params_before: before.total_params(),
        params_after: after.total_params(),
        pruned_ratio_pct: 100.0 * (1.0 - after.total_bits() as f64 / before.total_bits() as f64),
        memory_mib: after.total_bits() as f64 / BITS_PER_MIB,
        original_memory_mib: before.total_bits() as f64 / BITS_PER_MIB,
        speedup,
        layers: layer_rows(&original, &net),
        steps,
    };
    Ok((net, report))
}

/// Everything a run needs besides data: architecture, normalization and the
/// pruning/training settings.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub arch: DeskCnnConfig,
    pub norm: Normalization,
    pub prune: PruneRunConfig,
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',')
        .map(|x| {
            x.trim()
                .parse()
                .map_err(|_| Error::Config(format!("{key}: cannot parse {x:?}")))
        })
        .collect()
}

fn parse_one<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true/false, got {v:?}"))),
    }
}

impl RunConfig {
    /// Parses `key = value` lines. `#`/`;` start comments and `[section]`
    /// headers are ignored. Unknown keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = RunConfig::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split(['#', ';']).next().unwrap_or("").trim();
            if line.is_empty() || (line.starts_with('[') && line.ends_with(']')) {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            let p = &mut c.prune;
            match k {
                "scheme" => c.arch.scheme = v.parse()?,
                "widths" => {
                    let w: Vec<usize> = parse_list(k, v)?;
                    c.arch.widths = w
                        .try_into()
                        .map_err(|_| Error::Config("widths: expected four values".into()))?;
                }
                "classes" => c.arch.classes = parse_one(k, v)?,
                "residual" => c.arch.residual = parse_bool(k, v)?,
                "input_shape" => {
                    let s: Vec<usize> = parse_list(k, v)?;
                    c.arch.input_shape = s
                        .try_into()
                        .map_err(|_| Error::Config("input_shape: expected C,H,W".into()))?;
                }
                "norm_mean" => c.norm.mean = parse_list(k, v)?,
                "norm_std" => c.norm.std = parse_list(k, v)?,
                "direction" => p.direction = v.parse()?,
                "metric" => p.metric = v.parse()?,
                "finetune_trigger_pct" => p.finetune_trigger_pct = parse_one(k, v)?,
                "finetune_epochs" => p.finetune_epochs = parse_one(k, v)?,
                "final_finetune_epochs" => p.final_finetune_epochs = parse_one(k, v)?,
                "calib_size" => p.calib_size = parse_one(k, v)?,
                "seed" => p.seed = parse_one(k, v)?,
                "eval_passes" => p.eval_passes = parse_one(k, v)?,
                "alpha1" => p.bo.alpha1 = parse_one(k, v)?,
                "kappa" => p.bo.kappa = parse_one(k, v)?,
                "ratio_lower" => p.bo.lower = parse_one(k, v)?,
                "ratio_upper" => p.bo.upper = parse_one(k, v)?,
                "n_init" => p.bo.n_init = parse_one(k, v)?,
                "n_explore" => p.bo.n_explore = parse_one(k, v)?,
                "grid_points" => p.bo.grid_points = parse_one(k, v)?,
                "length_scale" => p.bo.gp.length_scale = parse_one(k, v)?,
                "gp_noise" => p.bo.gp.noise = parse_one(k, v)?,
                "lr0" => p.train.lr0 = parse_one(k, v)?,
                "lr_decay_factor" => p.train.lr_decay_factor = parse_one(k, v)?,
                "decay_every" => p.train.decay_every = parse_one(k, v)?,
                "epochs" => p.train.epochs = parse_one(k, v)?,
                "momentum" => p.train.momentum = parse_one(k, v)?,
                "batch_size" => p.train.batch_size = parse_one(k, v)?,
                "train_seed" => p.train.seed = parse_one(k, v)?,
                "hflip" => p.train.hflip = parse_bool(k, v)?,
                "bn_momentum" => p.train.bn_momentum = parse_one(k, v)?,
                other => return Err(Error::Config(format!("line {}: unknown key {other:?}", n + 1))),
            }
        }
        if c.norm.mean.len() != c.norm.std.len() {
            return Err(Error::Config("norm_mean and norm_std differ in length".into()));
        }
        c.prune.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }
}
