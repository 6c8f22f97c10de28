//! GP/UCB ratio search on a synthetic loss curve, compared with a dense grid.

use qprune::bayesopt::{objective_loss, optimize_ratio, BoConfig, LossTerms};

fn curve(r: f64) -> LossTerms {
    // Error is flat up to 0.23 and climbs steeply after; the size terms
    // shrink linearly.
    let excess = (r - 0.23).max(0.0);
    LossTerms {
        error_pct: 20.0 + 4000.0 * excess * excess,
        params_remaining_pct: 100.0 * (1.0 - r),
        size_remaining_pct: 100.0 * (1.0 - r),
    }
}

fn main() -> qprune::Result<()> {
    let cfg = BoConfig::default();
    let (best, trace) = optimize_ratio(&cfg, |r| Ok(curve(r)))?;
    trace.write_csv(std::io::stdout())?;
    let y = |r: f64| {
        let t = curve(r);
        objective_loss(t.error_pct, t.params_remaining_pct, t.size_remaining_pct, cfg.alpha1)
    };
    let grid_best = (0..=4000)
        .map(|i| cfg.lower + (cfg.upper - cfg.lower) * i as f64 / 4000.0)
        .min_by(|a, b| y(*a).total_cmp(&y(*b)))
        .expect("non-empty grid");
    println!("search picked {best:.4}, dense grid minimum at {grid_best:.4}");
    Ok(())
}
