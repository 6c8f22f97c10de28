//! Trains the desk-scale BNN on the procedural 10-class dataset.
//!
//! `cargo run --release --example train_desk_bnn -- [epochs] [seed] [lr0]`

use std::time::Instant;

use qprune::arch::{desk_cnn, DeskCnnConfig};
use qprune::data::{synth_images, Dataset, Normalization};
use qprune::engine::evaluate;
use qprune::train::{train, TrainConfig};

fn main() -> qprune::Result<()> {
    let mut args = std::env::args().skip(1);
    let epochs: usize = args.next().and_then(|a| a.parse().ok()).unwrap_or(10);
    let seed: u64 = args.next().and_then(|a| a.parse().ok()).unwrap_or(0);
    let lr0: f32 = args.next().and_then(|a| a.parse().ok()).unwrap_or(0.005);
    let norm = Normalization::default();
    let train_set = Dataset::from_raw(&synth_images(5000, seed), &norm)?;
    let val_set = Dataset::from_raw(&synth_images(1000, seed + 1_000_000), &norm)?;
    let net = desk_cnn(&DeskCnnConfig::default(), seed)?;
    let cfg = TrainConfig {
        epochs,
        seed,
        lr0,
        ..TrainConfig::default()
    };
    let t0 = Instant::now();
    let (net, history) = train(&net, &train_set, Some(&val_set), &cfg)?;
    for e in &history.epochs {
        println!(
            "epoch {:>2}  lr {:.5}  loss {:.4}  train {:.1}%  val {:.1}%",
            e.epoch,
            e.lr,
            e.train_loss,
            e.train_acc_pct,
            e.val_acc_pct.unwrap_or(f64::NAN)
        );
    }
    let r = evaluate(&net, &val_set, 10, seed)?;
    println!(
        "trained in {:.1}s; val error {:.2}%, median pass {:.1} ms",
        t0.elapsed().as_secs_f64(),
        r.top1_error_pct,
        r.latency.median_s * 1e3
    );
    Ok(())
}
