//! Fixed inputs shared by the benchmarks.

use acenet_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    Tensor::uniform(shape.to_vec(), -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// A solid ball of the given radius centred in a `side`³ grid, with a few
/// voxels flipped so the surface is irregular.
pub fn ball_mask(side: usize, radius: f64, seed: u64) -> Vec<bool> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = (side as f64 - 1.0) / 2.0;
    (0..side * side * side)
        .map(|i| {
            let (d, h, w) = (i / (side * side), i / side % side, i % side);
            let r2 = [d, h, w].iter().map(|&x| (x as f64 - c).powi(2)).sum::<f64>();
            (r2 <= radius * radius) ^ (rng.random::<f64>() < 0.01)
        })
        .collect()
}
