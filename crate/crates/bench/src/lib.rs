//! Seeded fixtures shared by the criterion benches.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tsforge_core::data::InstanceSet;

/// `n` noisy sine windows of length `len`, one channel.
pub fn sine_windows(n: usize, len: usize, seed: u64) -> InstanceSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows = (0..n)
        .map(|_| {
            let amp = rng.random_range(0.5..2.0);
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            (0..len)
                .map(|t| amp * (t as f64 * 0.26 + phase).sin() + rng.random_range(-0.1..0.1))
                .collect()
        })
        .collect();
    InstanceSet::univariate("x", rows).expect("valid fixture shape")
}

pub fn random_series(len: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Coefficient rows already at codec precision.
pub fn coefficient_rows(n: usize, k: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            (0..k)
                .map(|_| (rng.random_range(-50.0..50.0) * 1e4_f64).round() / 1e4)
                .collect()
        })
        .collect()
}
