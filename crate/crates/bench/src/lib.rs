//! Fixtures shared by the criterion benches.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Strictly positive `(pred, gt)` buffers of `n` pixels.
pub fn depth_pair(n: usize, seed: u64) -> (Vec<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gt: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..1.0)).collect();
    let pred = gt.iter().map(|g| g * rng.random_range(0.7..1.3)).collect();
    (pred, gt)
}
