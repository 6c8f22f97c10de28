//! Masks filters in a residual desk net, then compares the masked forward
//! pass with the physically shrunk network.

use qprune::arch::{desk_cnn, DeskCnnConfig};
use qprune::engine::forward_logits;
use qprune::tensor::TensorF;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> qprune::Result<()> {
    let cfg = DeskCnnConfig {
        residual: true,
        ..DeskCnnConfig::default()
    };
    let net = desk_cnn(&cfg, 1)?;
    let idx = |name: &str| net.layers.iter().position(|l| l.name == name).expect("layer exists");
    // conv2 and conv3 share one channel space through the shortcut.
    let masked = net
        .apply_filter_prune(idx("conv1"), &[0, 5])?
        .apply_filter_prune(idx("conv3"), &[1, 2, 9])?
        .apply_filter_prune(idx("conv4"), &[4, 17, 30])?;
    let shrunk = masked.shrink()?;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = TensorF::from_fn(vec![4, 3, 32, 32], |_| rng.gen_range(-2.0..2.0));
    let a = forward_logits(&masked, &x, false)?;
    let b = forward_logits(&shrunk, &x, false)?;
    let diff = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(p, q)| (p - q).abs())
        .fold(0.0f32, f32::max);
    let (before, after) = (net.account(), shrunk.account());
    println!("params {} -> {}", before.total_params(), after.total_params());
    println!("bits   {} -> {}", before.total_bits(), after.total_bits());
    println!("max |masked - shrunk| logits = {diff:e}");
    Ok(())
}
