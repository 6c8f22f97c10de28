//! Trains the desk BNN, then prunes it layer by layer with the GP ratio
//! search and prints the per-layer table.
//!
//! `cargo run --release --example prune_pipeline -- [epochs] [seed] [alpha1] [up|down]`

use std::time::Instant;

use qprune::arch::{desk_cnn, DeskCnnConfig};
use qprune::data::{synth_images, DataSplit, Dataset, Normalization};
use qprune::pipeline::{prune_network, PruneRunConfig};
use qprune::train::{train, TrainConfig};

fn main() -> qprune::Result<()> {
    let mut args = std::env::args().skip(1);
    let epochs: usize = args.next().and_then(|a| a.parse().ok()).unwrap_or(12);
    let seed: u64 = args.next().and_then(|a| a.parse().ok()).unwrap_or(0);
    let alpha1: f64 = args.next().and_then(|a| a.parse().ok()).unwrap_or(1.0);
    let direction = args.next().unwrap_or_else(|| "up".into()).parse()?;

    let norm = Normalization::default();
    let split = DataSplit {
        train: Dataset::from_raw(&synth_images(5000, seed), &norm)?,
        val: Dataset::from_raw(&synth_images(1000, seed + 1_000_000), &norm)?,
    };
    let train_cfg = TrainConfig {
        epochs,
        seed,
        lr0: 0.05,
        ..TrainConfig::default()
    };
    let t0 = Instant::now();
    let (net, _) = train(
        &desk_cnn(&DeskCnnConfig::default(), seed)?,
        &split.train,
        Some(&split.val),
        &train_cfg,
    )?;
    println!("trained in {:.1}s", t0.elapsed().as_secs_f64());

    let mut cfg = PruneRunConfig {
        direction,
        seed,
        train: train_cfg,
        ..PruneRunConfig::default()
    };
    cfg.bo.alpha1 = alpha1;
    let t0 = Instant::now();
    let (_, report) = prune_network(&net, &split, &cfg)?;
    for s in &report.steps {
        println!(
            "{:<6} {:<18} live {:>3}  ratio {:.3}  pruned {:>3}{}",
            s.name,
            s.rank_mode.to_string(),
            s.live_before,
            s.ratio,
            s.pruned,
            if s.finetuned { "  (fine-tuned)" } else { "" }
        );
    }
    print!("{}", report.render());
    println!("pruned in {:.1}s", t0.elapsed().as_secs_f64());
    Ok(())
}
