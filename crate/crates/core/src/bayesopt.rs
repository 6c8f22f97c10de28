//! Per-layer pruning-ratio search with a Gaussian-process surrogate.
//!
//! The ratio axis is normalized to `[0, 1]` over the search bounds. Observed
//! losses are standardized before fitting; predictions are mapped back to
//! loss units. The acquisition picks the grid point minimizing `μ − κσ`.

use std::io::Write;

use crate::data::Dataset;
use crate::engine::evaluate;
use crate::error::{Error, Result};
use crate::surgery::NetworkDef;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GpConfig {
    /// Squared-exponential length scale on the normalized axis.
    pub length_scale: f64,
    /// Diagonal jitter σ_n².
    pub noise: f64,
    /// Lower bound for the signal variance σ_f².
    pub min_signal_var: f64,
}

impl Default for GpConfig {
    fn default() -> Self {
        Self {
            length_scale: 0.2,
            noise: 1e-6,
            min_signal_var: 1.0,
        }
    }
}

impl GpConfig {
    pub fn kernel(&self, signal_var: f64, a: f64, b: f64) -> f64 {
        let d = (a - b) / self.length_scale;
        signal_var * (-0.5 * d * d).exp()
    }
}

/// Lower-triangular Cholesky factor of a dense row-major `n×n` matrix.
pub fn cholesky(a: &[f64], n: usize) -> Result<Vec<f64>> {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if s <= 0.0 || !s.is_finite() {
                    return Err(Error::Singular);
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    Ok(l)
}

/// Solves `L Lᵀ x = b` given the Cholesky factor.
pub fn cholesky_solve(l: &[f64], n: usize, b: &[f64]) -> Vec<f64> {
    let mut y = b.to_vec();
    for i in 0..n {
        for k in 0..i {
            y[i] -= l[i * n + k] * y[k];
        }
        y[i] /= l[i * n + i];
    }
    for i in (0..n).rev() {
        for k in i + 1..n {
            y[i] -= l[k * n + i] * y[k];
        }
        y[i] /= l[i * n + i];
    }
    y
}

/// Fitted GP posterior over normalized ratios.
#[derive(Debug, Clone, PartialEq)]
pub struct GpState {
    pub cfg: GpConfig,
    pub x: Vec<f64>,
    pub y_raw: Vec<f64>,
    pub y_std: Vec<f64>,
    pub y_mean: f64,
    pub y_scale: f64,
    pub signal_var: f64,
    /// `C_N⁻¹`, row-major.
    pub information: Vec<f64>,
    /// `C_N⁻¹ y_std`.
    weights: Vec<f64>,
}

impl GpState {
    pub fn fit(x: &[f64], y: &[f64], cfg: GpConfig) -> Result<Self> {
        if x.len() != y.len() {
            return Err(Error::LengthMismatch {
                left: x.len(),
                right: y.len(),
            });
        }
        if x.is_empty() {
            return Err(Error::Config("GP needs at least one observation".into()));
        }
        if cfg.length_scale <= 0.0 || cfg.noise <= 0.0 {
            return Err(Error::Config("length scale and noise must be positive".into()));
        }
        let n = x.len();
        let y_mean = y.iter().sum::<f64>() / n as f64;
        let y_scale = if n < 2 {
            1.0
        } else {
            let var = y.iter().map(|v| (v - y_mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            if var > 0.0 {
                var.sqrt()
            } else {
                1.0
            }
        };
        let y_std: Vec<f64> = y.iter().map(|v| (v - y_mean) / y_scale).collect();
        let var_std = y_std.iter().map(|v| v * v).sum::<f64>() / n as f64;
        let signal_var = var_std.max(cfg.min_signal_var);
        let mut c = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                c[i * n + j] = cfg.kernel(signal_var, x[i], x[j]);
            }
            c[i * n + i] += cfg.noise;
        }
        let l = cholesky(&c, n)?;
        let mut information = vec![0.0; n * n];
        for j in 0..n {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            for (i, v) in cholesky_solve(&l, n, &e).into_iter().enumerate() {
                information[i * n + j] = v;
            }
        }
        let weights = cholesky_solve(&l, n, &y_std);
        Ok(Self {
            cfg,
            x: x.to_vec(),
            y_raw: y.to_vec(),
            y_std,
            y_mean,
            y_scale,
            signal_var,
            information,
            weights,
        })
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    /// Predictive mean and variance in loss units, variance not clamped.
    pub fn predictive_unclamped(&self, x_hat: f64) -> (f64, f64) {
        let n = self.len();
        let k: Vec<f64> = self
            .x
            .iter()
            .map(|&xi| self.cfg.kernel(self.signal_var, x_hat, xi))
            .collect();
        let mu: f64 = k.iter().zip(&self.weights).map(|(a, b)| a * b).sum();
        let mut quad = 0.0;
        for i in 0..n {
            let row = &self.information[i * n..(i + 1) * n];
            quad += k[i] * row.iter().zip(&k).map(|(a, b)| a * b).sum::<f64>();
        }
        let var = self.signal_var - quad;
        (self.y_mean + self.y_scale * mu, self.y_scale * self.y_scale * var)
    }

    /// `(μ, σ²)` at a normalized ratio, with σ² clamped at zero.
    pub fn predictive(&self, x_hat: f64) -> (f64, f64) {
        let (mu, var) = self.predictive_unclamped(x_hat);
        (mu, var.max(0.0))
    }
}

/// Acquisition value `μ − κσ` (lower is better).
pub fn ucb(mu: f64, sigma: f64, kappa: f64) -> f64 {
    mu - kappa * sigma
}

/// Compound loss `L_c + α₁·L_params + (α₁/4)·L_size`, all in percent.
pub fn objective_loss(error_pct: f64, params_remaining_pct: f64, size_remaining_pct: f64, alpha1: f64) -> f64 {
    error_pct + alpha1 * params_remaining_pct + alpha1 / 4.0 * size_remaining_pct
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoConfig {
    pub lower: f64,
    pub upper: f64,
    pub kappa: f64,
    pub n_init: usize,
    pub n_explore: usize,
    pub alpha1: f64,
    pub grid_points: usize,
    pub gp: GpConfig,
}

impl Default for BoConfig {
    fn default() -> Self {
        Self {
            lower: 0.0,
            upper: 0.40,
            kappa: 2.5,
            n_init: 5,
            n_explore: 5,
            alpha1: 1.0,
            grid_points: 401,
            gp: GpConfig::default(),
        }
    }
}

impl BoConfig {
    pub fn alpha2(&self) -> f64 {
        self.alpha1 / 4.0
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.lower && self.lower < self.upper && self.upper < 1.0) {
            return Err(Error::Config(format!(
                "ratio bounds [{}, {}] must satisfy 0 ≤ lower < upper < 1",
                self.lower, self.upper
            )));
        }
        if self.kappa < 0.0 || self.grid_points < 2 || self.n_init == 0 {
            return Err(Error::Config(
                "need κ ≥ 0, at least 2 grid points and 1 initial point".into(),
            ));
        }
        Ok(())
    }

    pub fn normalize(&self, ratio: f64) -> f64 {
        (ratio - self.lower) / (self.upper - self.lower)
    }

    pub fn denormalize(&self, t: f64) -> f64 {
        self.lower + t * (self.upper - self.lower)
    }

    /// Evenly spaced initial ratios, both bounds included.
    pub fn initial_ratios(&self) -> Vec<f64> {
        match self.n_init {
            1 => vec![self.lower],
            n => (0..n).map(|i| self.denormalize(i as f64 / (n - 1) as f64)).collect(),
        }
    }
}

/// Grid ratio minimizing `μ − κσ` (first grid point on ties).
pub fn next_candidate(gp: &GpState, cfg: &BoConfig) -> f64 {
    let g = cfg.grid_points;
    let mut best = (f64::INFINITY, cfg.lower);
    for i in 0..g {
        let t = i as f64 / (g - 1) as f64;
        let (mu, var) = gp.predictive(t);
        let a = ucb(mu, var.sqrt(), cfg.kappa);
        if a < best.0 {
            best = (a, cfg.denormalize(t));
        }
    }
    best.1
}

/// Inputs to the compound loss for one candidate ratio.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossTerms {
    pub error_pct: f64,
    pub params_remaining_pct: f64,
    pub size_remaining_pct: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub step: usize,
    pub ratio: f64,
    pub terms: LossTerms,
    pub y: f64,
    /// Surrogate prediction at `ratio` before it was observed.
    pub mu: Option<f64>,
    pub sigma: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct BoTrace {
    pub observations: Vec<Observation>,
}

impl BoTrace {
    /// Ratio with the smallest observed loss; ties go to the larger ratio.
    pub fn best_ratio(&self) -> Option<f64> {
        self.observations
            .iter()
            .min_by(|a, b| a.y.total_cmp(&b.y).then(b.ratio.total_cmp(&a.ratio)))
            .map(|o| o.ratio)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["step", "ratio", "L_c", "L_params", "L_size", "y", "mu", "sigma"])?;
        let opt = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
        for o in &self.observations {
            w.write_record([
                o.step.to_string(),
                o.ratio.to_string(),
                o.terms.error_pct.to_string(),
                o.terms.params_remaining_pct.to_string(),
                o.terms.size_remaining_pct.to_string(),
                o.y.to_string(),
                opt(o.mu),
                opt(o.sigma),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Runs `n_init` evenly spaced observations and `n_explore` acquisition
/// steps against `observe`, returning the best observed ratio and the trace.
pub fn optimize_ratio<F>(cfg: &BoConfig, mut observe: F) -> Result<(f64, BoTrace)>
where
    F: FnMut(f64) -> Result<LossTerms>,
{
    cfg.validate()?;
    let mut trace = BoTrace::default();
    let mut xs: Vec<f64> = Vec::new();
    let mut ys: Vec<f64> = Vec::new();
    let mut gp: Option<GpState> = None;
    let mut record = |ratio: f64, gp: &Option<GpState>, trace: &mut BoTrace, xs: &mut Vec<f64>, ys: &mut Vec<f64>| {
        let (mu, sigma) = match gp {
            Some(g) => {
                let (m, v) = g.predictive(cfg.normalize(ratio));
                (Some(m), Some(v.sqrt()))
            }
            None => (None, None),
        };
        let terms = observe(ratio)?;
        let y = objective_loss(
            terms.error_pct,
            terms.params_remaining_pct,
            terms.size_remaining_pct,
            cfg.alpha1,
        );
        trace.observations.push(Observation {
            step: trace.observations.len(),
            ratio,
            terms,
            y,
            mu,
            sigma,
        });
        xs.push(cfg.normalize(ratio));
        ys.push(y);
        Ok::<_, Error>(())
    };
    for r in cfg.initial_ratios() {
        record(r, &gp, &mut trace, &mut xs, &mut ys)?;
        gp = Some(GpState::fit(&xs, &ys, cfg.gp)?);
    }
    for _ in 0..cfg.n_explore {
        let r = next_candidate(gp.as_ref().expect("fitted after initial points"), cfg);
        record(r, &gp, &mut trace, &mut xs, &mut ys)?;
        gp = Some(GpState::fit(&xs, &ys, cfg.gp)?);
    }
    Ok((trace.best_ratio().expect("at least one observation"), trace))
}

/// Number of filters removed for `ratio` out of `live` live filters:
/// `⌈ratio·live⌉`, leaving at least one.
pub fn prune_count(ratio: f64, live: usize) -> usize {
    // The small slack keeps grid ratios such as 0.3·10 from rounding up to 4.
    let c = (ratio * live as f64 - 1e-9).ceil().max(0.0) as usize;
    c.min(live.saturating_sub(1))
}

/// Reference totals the loss percentages are measured against.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SizeBaseline {
    pub params: u64,
    pub bits: u64,
}

impl SizeBaseline {
    pub fn of(net: &NetworkDef) -> Self {
        let r = net.account();
        Self {
            params: r.total_params(),
            bits: r.total_bits(),
        }
    }

    pub fn terms(&self, net: &NetworkDef, error_pct: f64) -> LossTerms {
        let r = net.account();
        LossTerms {
            error_pct,
            params_remaining_pct: 100.0 * r.total_params() as f64 / self.params as f64,
            size_remaining_pct: 100.0 * r.total_bits() as f64 / self.bits as f64,
        }
    }
}

/// Searches the pruning ratio of `layer`. `prune_order` lists its live
/// filters, first-to-prune first. Each candidate masks the top filters on a
/// copy of `net` and is scored on `calib` without fine-tuning.
pub fn optimize_layer_ratio(
    net: &NetworkDef,
    layer: usize,
    prune_order: &[usize],
    calib: &Dataset,
    baseline: SizeBaseline,
    cfg: &BoConfig,
    seed: u64,
) -> Result<(f64, BoTrace)> {
    let live = net
        .layers
        .get(layer)
        .ok_or(Error::Index {
            index: layer,
            extent: net.layers.len(),
        })?
        .live_outputs()
        .len();
    if live <= 1 {
        return Ok((0.0, BoTrace::default()));
    }
    optimize_ratio(cfg, |ratio| {
        let count = prune_count(ratio, live);
        let candidate = net.apply_filter_prune(layer, &prune_order[..count.min(prune_order.len())])?;
        let err = evaluate(&candidate, calib, 0, seed)?.top1_error_pct;
        Ok(baseline.terms(&candidate, err))
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn objective_examples() {
        assert_eq!(objective_loss(30.0, 80.0, 90.0, 8.0), 850.0);
        assert_eq!(objective_loss(12.5, 80.0, 90.0, 0.0), 12.5);
    }

    #[test]
    fn ucb_examples() {
        assert_eq!(ucb(2.0, 1.0, 2.5), -0.5);
        assert_eq!(ucb(2.0, 1.0, 0.0), 2.0);
    }

    #[test]
    fn prune_count_rule() {
        assert_eq!(prune_count(0.0, 8), 0);
        assert_eq!(prune_count(0.1, 8), 1);
        assert_eq!(prune_count(0.4, 8), 4);
        assert_eq!(prune_count(0.3, 10), 3);
        assert_eq!(prune_count(0.99, 2), 1);
    }

    #[test]
    fn far_point_recovers_prior() {
        let gp = GpState::fit(&[0.0], &[3.0], GpConfig::default()).unwrap();
        let (mu, var) = gp.predictive(1.0);
        assert!((mu - 3.0).abs() < 1e-3);
        assert!((var - gp.signal_var).abs() < 1e-3);
    }

    #[test]
    fn duplicate_points_without_jitter_are_singular() {
        let cfg = GpConfig {
            noise: f64::MIN_POSITIVE,
            ..GpConfig::default()
        };
        assert!(matches!(
            GpState::fit(&[0.3, 0.3], &[1.0, 2.0], cfg),
            Err(Error::Singular)
        ));
    }

    #[test]
    fn single_mid_observation_sends_candidate_to_a_bound() {
        let cfg = BoConfig {
            kappa: 100.0,
            ..BoConfig::default()
        };
        let gp = GpState::fit(&[0.5], &[1.0], cfg.gp).unwrap();
        let r = next_candidate(&gp, &cfg);
        assert!(r == cfg.lower || r == cfg.upper);
    }

    #[test]
    fn trace_counts_and_tie_break() {
        let (best, trace) = optimize_ratio(&BoConfig::default(), |_| {
            Ok(LossTerms {
                error_pct: 10.0,
                params_remaining_pct: 0.0,
                size_remaining_pct: 0.0,
            })
        })
        .unwrap();
        assert_eq!(trace.observations.len(), 10);
        assert_eq!(best, trace.observations.iter().map(|o| o.ratio).fold(0.0, f64::max));
    }
}
