//! Shared inputs for the criterion benchmarks under `benches/`.

use qkit_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Uniform values in `[-1, 1)` from a fixed seed.
pub fn uniform(shape: Vec<usize>, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Heavy-tailed sample: mostly small values with rare large outliers.
pub fn heavy_tailed(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let v: f64 = rng.random_range(-1.0..1.0);
            if rng.random_bool(0.001) { v * 100.0 } else { v }
        })
        .collect()
}
