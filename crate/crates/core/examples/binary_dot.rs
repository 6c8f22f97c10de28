//! XNOR/popcount dot products on packed ±1 vectors, and a binary convolution
//! through the popcount path compared with the float path.

use qprune::arch::{desk_cnn, DeskCnnConfig};
use qprune::engine::{binary_conv_forward, conv_forward};
use qprune::tensor::{pack, popcount_dot, TensorF};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> qprune::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for n in [16usize, 64, 257, 1024] {
        let a: Vec<u8> = (0..n).map(|_| rng.gen_range(0..2)).collect();
        let b: Vec<u8> = (0..n).map(|_| rng.gen_range(0..2)).collect();
        let real: i64 = a
            .iter()
            .zip(&b)
            .map(|(&x, &y)| (2 * x as i64 - 1) * (2 * y as i64 - 1))
            .sum();
        let fast = popcount_dot(&pack(&a, &[n], 1)?, &pack(&b, &[n], 1)?)?;
        println!("n={n:<5} real {real:>5}  popcount {fast:>5}");
    }

    let net = desk_cnn(&DeskCnnConfig::default(), 3)?;
    let layer = net
        .layers
        .iter()
        .find(|l| l.name == "conv2")
        .expect("desk net has conv2");
    let input = TensorF::from_fn(vec![2, 8, 16, 16], |_| rng.gen_range(-1.0..1.0));
    let float = conv_forward(&input, layer)?;
    let binary = binary_conv_forward(&input, layer)?;
    let max_diff = float
        .data()
        .iter()
        .zip(binary.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f32, f32::max);
    println!("conv2 output {:?}, max |float - popcount| = {max_diff}", float.shape());
    Ok(())
}
