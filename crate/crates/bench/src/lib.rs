//! Shared fixtures for the criterion benches.

use ncgcd::data::{gcd_split, sample_sphere_mixture};
use ncgcd::{GcdDataset, Matrix, SeededRng};

/// The 10-class, d=32 synthetic GCD instance used throughout the benches.
pub fn ten_class_problem(seed: u64) -> GcdDataset {
    let (x, y) = sample_sphere_mixture(10, 32, 300.0, 100, &mut SeededRng::new(seed))
        .expect("valid mixture parameters");
    gcd_split(x, y, 0.5, 0.5, &mut SeededRng::new(seed + 1)).expect("valid split")
}

/// Uniformly random `k × k` profit table with entries below `max`.
pub fn random_profits(k: usize, max: usize, seed: u64) -> Vec<u64> {
    let mut rng = SeededRng::new(seed);
    (0..k * k).map(|_| rng.below(max) as u64).collect()
}

/// First `n` rows of a problem's features.
pub fn head_rows(data: &GcdDataset, n: usize) -> Matrix {
    data.features.select_rows(&(0..n.min(data.len())).collect::<Vec<_>>())
}
