mod common;

use advdet_core::maha::{fit_gaussian, maha_distance, maha_layer_score, MahaInput, ScoreHead};
use advdet_core::whitening::LayerWhitener;
use advdet_core::Matrix;
use rand::Rng;

fn fitted_instance(r: &mut impl Rng) -> (Matrix, Vec<usize>, usize) {
    let d = r.random_range(2..=8);
    let c = r.random_range(2..=4);
    let n = r.random_range(4 * d..=12 * d).max(3 * c);
    let mix = common::random_matrix(&mut common::rng(r.random()), d, d, 1.0);
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let z: Vec<f64> = (0..d).map(|_| r.random_range(-1.0..1.0)).collect();
            let mut x = mix.matvec(&z);
            x[0] += 3.0 * (i % c) as f64;
            x
        })
        .collect();
    let labels = (0..n).map(|i| i % c).collect();
    (Matrix::from_rows(&rows).unwrap(), labels, c)
}

#[test]
fn whitened_norm_equals_mahalanobis_distance() {
    let mut r = common::rng(23);
    for _ in 0..100 {
        let (x, labels, c) = fitted_instance(&mut r);
        let w = LayerWhitener::fit(&x, &labels, c).unwrap();
        let g = fit_gaussian(&x, &labels, c).unwrap();
        for _ in 0..5 {
            let h: Vec<f64> = (0..x.cols()).map(|_| r.random_range(-4.0..4.0)).collect();
            let class = r.random_range(0..c);
            let z = w.whiten(&h, class).unwrap();
            let sq: f64 = z.iter().map(|v| v * v).sum();
            let m = maha_distance(&g, &h, class).unwrap();
            assert!((sq - m).abs() <= 1e-8 * m.max(1.0), "{sq} vs {m}");
        }
    }
}

#[test]
fn whitened_training_covariance_is_identity() {
    let mut r = common::rng(29);
    for _ in 0..100 {
        let (x, labels, c) = fitted_instance(&mut r);
        let w = LayerWhitener::fit(&x, &labels, c).unwrap();
        let z = w.whiten_rows(&x, &labels).unwrap();
        let n = z.rows() as f64;
        let cov = z.transpose().matmul(&z).unwrap();
        for a in 0..z.cols() {
            for b in 0..z.cols() {
                let want = if a == b { 1.0 } else { 0.0 };
                assert!((cov[(a, b)] / n - want).abs() <= 1e-8);
            }
        }
    }
}

#[test]
fn feature_score_is_negated_nearest_distance() {
    let mut r = common::rng(31);
    let (x, labels, c) = fitted_instance(&mut r);
    let g = fit_gaussian(&x, &labels, c).unwrap();
    let h = x.row(0);
    let min = (0..c).map(|k| g.distance(h, k)).fold(f64::INFINITY, f64::min);
    let max = (0..c).map(|k| g.distance(h, k)).fold(0.0, f64::max);
    let s_min = maha_layer_score(&g, 0, MahaInput::Features(h), 0.0, ScoreHead::Min).unwrap();
    let s_max = maha_layer_score(&g, 0, MahaInput::Features(h), 0.0, ScoreHead::Max).unwrap();
    assert_eq!(s_min, -min);
    assert_eq!(s_max, -max);
}
