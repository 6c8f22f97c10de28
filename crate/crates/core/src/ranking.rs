//! Importance orderings for kernels and filters.
//!
//! Every score is the distance between a weight slice and its quantized
//! image, so a larger score marks a worse-quantized unit. The prune-first
//! order sorts by descending score and breaks ties by ascending unit index.
//!
//! The quantized image is always computed over the whole layer before
//! slicing, since DoReFa normalises by the layer-wide maximum.

use std::cmp::Ordering;
use std::fmt;
use std::io::Write;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::metrics::DistanceKind;
use crate::quant::{quantize_weights_real, QuantScheme};
use crate::tensor::TensorF;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum RankUnit {
    Kernel { filter: usize, channel: usize },
    Filter(usize),
}

impl fmt::Display for RankUnit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RankUnit::Kernel { filter, channel } => write!(f, "{filter}:{channel}"),
            RankUnit::Filter(k) => write!(f, "{k}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankResult {
    pub layer: usize,
    /// Units in natural order (filter-major for kernels).
    pub units: Vec<RankUnit>,
    /// Distance per unit, aligned with `units`.
    pub scores: Vec<f64>,
    /// Positions into `units`, prune-first.
    pub order: Vec<usize>,
}

impl RankResult {
    pub fn from_scores(layer: usize, units: Vec<RankUnit>, scores: Vec<f64>) -> Self {
        let order = prune_first_order(&scores);
        Self {
            layer,
            units,
            scores,
            order,
        }
    }

    /// Renames units computed on a gathered sub-tensor back to the original
    /// filter and channel indices. Both id lists must be ascending so the
    /// tie-break order is preserved.
    pub fn remap(mut self, filters: &[usize], channels: &[usize]) -> Self {
        for u in &mut self.units {
            *u = match *u {
                RankUnit::Filter(k) => RankUnit::Filter(filters[k]),
                RankUnit::Kernel { filter, channel } => RankUnit::Kernel {
                    filter: filters[filter],
                    channel: channels[channel],
                },
            };
        }
        self
    }

    /// Units sorted prune-first.
    pub fn prune_order(&self) -> Vec<RankUnit> {
        self.order.iter().map(|&i| self.units[i]).collect()
    }

    /// Filter indices of the first `count` units of the prune-first order.
    pub fn top_filters(&self, count: usize) -> Vec<usize> {
        self.order
            .iter()
            .take(count)
            .filter_map(|&i| match self.units[i] {
                RankUnit::Filter(k) => Some(k),
                RankUnit::Kernel { .. } => None,
            })
            .collect()
    }

    /// Writes `layer,unit,score,rank` rows, rank 0 being pruned first.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        #[derive(Serialize)]
        struct Row {
            layer: usize,
            unit: String,
            score: f64,
            rank: usize,
        }
        let mut rank = vec![0usize; self.units.len()];
        for (r, &i) in self.order.iter().enumerate() {
            rank[i] = r;
        }
        let mut w = csv::Writer::from_writer(out);
        for (i, unit) in self.units.iter().enumerate() {
            w.serialize(Row {
                layer: self.layer,
                unit: unit.to_string(),
                score: self.scores[i],
                rank: rank[i],
            })?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Descending by score, ties by ascending position.
pub fn prune_first_order(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    order
}

fn quantized_image(w: &TensorF, scheme: Option<&QuantScheme>, live: Option<&[bool]>) -> TensorF {
    match scheme {
        Some(s) => quantize_weights_real(w, s, live),
        None => w.clone(),
    }
}

fn slice_distance(metric: DistanceKind, real: &[f32], quant: &[f32]) -> Result<f64> {
    let v: Vec<f64> = real.iter().map(|&x| x as f64).collect();
    let q: Vec<f64> = quant.iter().map(|&x| x as f64).collect();
    metric.distance(&v, &q)
}

fn require_rank4(w: &TensorF, what: &str) -> Result<()> {
    if w.shape().len() != 4 {
        return Err(Error::Shape(format!(
            "{what} expects K×C×h×w weights, got {:?}",
            w.shape()
        )));
    }
    Ok(())
}

/// Scores each `h×w` kernel of a convolutional layer against its quantization.
pub fn rank_kernels(
    layer: usize,
    weights: &TensorF,
    scheme: Option<&QuantScheme>,
    metric: DistanceKind,
) -> Result<RankResult> {
    require_rank4(weights, "kernel ranking")?;
    let (k_ext, c_ext) = (weights.shape()[0], weights.shape()[1]);
    let q = quantized_image(weights, scheme, None);
    let mut units = Vec::with_capacity(k_ext * c_ext);
    let mut scores = Vec::with_capacity(k_ext * c_ext);
    for k in 0..k_ext {
        for c in 0..c_ext {
            units.push(RankUnit::Kernel { filter: k, channel: c });
            scores.push(slice_distance(metric, weights.kernel(k, c)?, q.kernel(k, c)?)?);
        }
    }
    Ok(RankResult::from_scores(layer, units, scores))
}

/// Scores each filter on its own flattened weights.
pub fn rank_filters_own(
    layer: usize,
    weights: &TensorF,
    scheme: Option<&QuantScheme>,
    metric: DistanceKind,
) -> Result<RankResult> {
    if weights.shape().len() < 2 {
        return Err(Error::Shape(format!(
            "filter ranking expects rank>=2 weights, got {:?}",
            weights.shape()
        )));
    }
    let q = quantized_image(weights, scheme, None);
    let k_ext = weights.filters();
    let mut scores = Vec::with_capacity(k_ext);
    for k in 0..k_ext {
        scores.push(slice_distance(metric, weights.filter(k)?, q.filter(k)?)?);
    }
    let units = (0..k_ext).map(RankUnit::Filter).collect();
    Ok(RankResult::from_scores(layer, units, scores))
}

/// A layer that reads the ranked layer's output channels.
#[derive(Debug, Clone, Copy)]
pub struct Consumer<'a> {
    /// `J×K×h×w` weights; fully-connected layers use their spatial extent as
    /// the kernel, so `1×1` after global pooling.
    pub weights: &'a TensorF,
    pub scheme: Option<&'a QuantScheme>,
    /// Optional `J·K` flags; kernels flagged false are left out of the mean.
    pub kernel_live: Option<&'a [bool]>,
}

/// Scores filter `k` of the current layer by the mean distance of the kernels
/// in the next layer that read channel `k`.
pub fn rank_filters_interaction(
    layer: usize,
    next_weights: &TensorF,
    next_scheme: Option<&QuantScheme>,
    metric: DistanceKind,
) -> Result<RankResult> {
    rank_filters_interaction_multi(
        layer,
        &[Consumer {
            weights: next_weights,
            scheme: next_scheme,
            kernel_live: None,
        }],
        metric,
    )
}

/// Interaction ranking when several layers consume the same channels (a
/// residual stream feeding a block and its downsample path). The mean runs
/// over every consuming kernel.
pub fn rank_filters_interaction_multi(
    layer: usize,
    consumers: &[Consumer<'_>],
    metric: DistanceKind,
) -> Result<RankResult> {
    let first = consumers
        .first()
        .ok_or_else(|| Error::Shape("interaction ranking needs a consumer".into()))?;
    require_rank4(first.weights, "interaction ranking")?;
    let k_ext = first.weights.shape()[1];
    let mut sums = vec![0.0f64; k_ext];
    let mut counts = vec![0usize; k_ext];
    for cons in consumers {
        let w = cons.weights;
        require_rank4(w, "interaction ranking")?;
        if w.shape()[1] != k_ext {
            return Err(Error::Shape(format!(
                "consumer reads {} channels, expected {k_ext}",
                w.shape()[1]
            )));
        }
        let kl = w.kernel_len();
        let live_elems: Option<Vec<bool>> = cons
            .kernel_live
            .map(|kl_mask| kl_mask.iter().flat_map(|&b| std::iter::repeat_n(b, kl)).collect());
        let q = quantized_image(w, cons.scheme, live_elems.as_deref());
        for j in 0..w.filters() {
            for (k, (sum, count)) in sums.iter_mut().zip(counts.iter_mut()).enumerate() {
                if cons.kernel_live.is_some_and(|m| !m[j * k_ext + k]) {
                    continue;
                }
                *sum += slice_distance(metric, w.kernel(j, k)?, q.kernel(j, k)?)?;
                *count += 1;
            }
        }
    }
    let scores = sums
        .iter()
        .zip(&counts)
        .map(|(&s, &c)| if c == 0 { 0.0 } else { s / c as f64 })
        .collect();
    let units = (0..k_ext).map(RankUnit::Filter).collect();
    Ok(RankResult::from_scores(layer, units, scores))
}
