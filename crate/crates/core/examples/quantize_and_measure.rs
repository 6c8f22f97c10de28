//! Quantizes random filters under each scheme and reports how far each one
//! sits from its quantized image, by angle and by euclidean distance.

use qprune::metrics::DistanceKind;
use qprune::quant::{quantize_weights, quantize_weights_real, QuantScheme};
use qprune::tensor::TensorF;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn main() -> qprune::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let normal = Normal::new(0.0f32, 0.5).expect("valid std");
    let w = TensorF::from_fn(vec![4, 3, 3, 3], |_| normal.sample(&mut rng));
    for scheme in [QuantScheme::bnn(), QuantScheme::xnor(), QuantScheme::dorefa2()] {
        let packed = quantize_weights(&w, &scheme)?;
        let q = quantize_weights_real(&w, &scheme, None);
        println!(
            "{scheme}: {} bits/code, {} words",
            packed.bits_per_code(),
            packed.words().len()
        );
        for k in 0..w.filters() {
            let v: Vec<f64> = w.filter(k)?.iter().map(|&x| x as f64).collect();
            let t: Vec<f64> = q.filter(k)?.iter().map(|&x| x as f64).collect();
            println!(
                "  filter {k}: angle {:.4} rad  euclid {:.4}",
                DistanceKind::Angle.distance(&v, &t)?,
                DistanceKind::Euclidean.distance(&v, &t)?
            );
        }
    }
    Ok(())
}
