//! Kernel, own-filter and interaction rankings of one layer of the desk net.
//!
//! `cargo run --example rank_filters -- [layer] [angle|euclid]`

use qprune::arch::{desk_cnn, DeskCnnConfig};
use qprune::pipeline::{default_rank_mode, rank_layer, RankMode};

fn main() -> qprune::Result<()> {
    let mut args = std::env::args().skip(1);
    let name = args.next().unwrap_or_else(|| "conv2".into());
    let metric = args.next().unwrap_or_else(|| "angle".into()).parse()?;
    let net = desk_cnn(&DeskCnnConfig::default(), 5)?;
    let layer = net
        .layers
        .iter()
        .position(|l| l.name == name)
        .ok_or_else(|| qprune::Error::Config(format!("no layer {name:?}")))?;
    println!("default mode for {name}: {}", default_rank_mode(&net, layer));
    for mode in [RankMode::FilterOwn, RankMode::FilterInteraction] {
        let r = rank_layer(&net, layer, mode, metric)?;
        println!("{mode}: prune first {:?}", r.top_filters(5));
    }
    let kernels = rank_layer(&net, layer, RankMode::Kernel, metric)?;
    println!("kernel ranking (first rows):");
    let mut rows = Vec::new();
    kernels.write_csv(&mut rows)?;
    for line in String::from_utf8_lossy(&rows).lines().take(6) {
        println!("  {line}");
    }
    Ok(())
}
