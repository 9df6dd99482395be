//! Seeded inputs shared by the benchmarks.

use advdet_core::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// `n × d` standard normal rows.
pub fn gaussian_rows(n: usize, d: usize, seed: u64) -> Matrix {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..n * d).map(|_| StandardNormal.sample(&mut r)).collect();
    Matrix::from_vec(n, d, data).expect("shape matches data")
}

/// Scores with a mild signal and roughly balanced labels.
pub fn labelled_scores(n: usize, seed: u64) -> (Vec<f64>, Vec<bool>) {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let labels: Vec<bool> = (0..n).map(|_| r.random_bool(0.5)).collect();
    let scores = labels
        .iter()
        .map(|&l| {
            let z: f64 = StandardNormal.sample(&mut r);
            z + if l { 1.0 } else { 0.0 }
        })
        .collect();
    (scores, labels)
}
