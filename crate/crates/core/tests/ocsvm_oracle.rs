mod common;

use advdet_core::ocsvm::{fit_ocsvm, OcsvmParams};
use advdet_core::Matrix;
use proptest::prelude::*;
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Full dual vector of a fitted model, aligned with the training rows.
fn dense_alphas(x: &Matrix, model: &advdet_core::OcsvmModel) -> Vec<f64> {
    let mut a = vec![0.0; x.rows()];
    for (sv, &alpha) in model.support_vectors.iter_rows().zip(&model.alphas) {
        let i = (0..x.rows()).find(|&i| x.row(i) == sv).expect("support vector is a training row");
        a[i] = alpha;
    }
    a
}

#[test]
fn smo_matches_projected_gradient_oracle() {
    let mut r = common::rng(5);
    for case in 0..100 {
        let n = r.random_range(4..=30);
        let pts: Vec<Vec<f64>> = (0..n).map(|_| vec![r.random_range(-2.0..2.0), r.random_range(-2.0..2.0)]).collect();
        let nu = r.random_range(0.05..0.95);
        let gamma = r.random_range(0.1f64..3.0);
        let x = Matrix::from_rows(&pts).unwrap();
        let model = fit_ocsvm(&x, &OcsvmParams::new(nu, gamma)).unwrap();
        assert!(model.kkt_residual <= 1e-6, "case {case}: residual {}", model.kkt_residual);

        let k = common::rbf_gram(&pts, gamma);
        let ub = 1.0 / (nu * n as f64);
        let a = common::ocsvm_qp_oracle(&k, ub, 1e-10);
        let g: Vec<f64> = k.iter().map(|row| row.iter().zip(&a).map(|(p, q)| p * q).sum()).collect();
        assert!(common::kkt_gap(&a, &g, ub) <= 1e-10, "case {case}: oracle did not converge");
        let (lo, hi) = common::rho_interval(&a, &g, ub, 1e-9);
        assert!(
            model.rho >= lo - 1e-4 && model.rho <= hi + 1e-4,
            "case {case}: rho {} outside [{lo}, {hi}]",
            model.rho
        );
        for (i, p) in pts.iter().enumerate() {
            let ours = model.score(p);
            // Oracle decision value with its own offset clamped to ours when ρ is not pinned.
            let oracle = g[i] - model.rho.clamp(lo, hi);
            assert!((ours - oracle).abs() <= 1e-4, "case {case} row {i}: {ours} vs {oracle}");
        }

        // Independent KKT check over all rows, including non-support vectors.
        let dense = dense_alphas(&x, &model);
        let ours_g: Vec<f64> = pts.iter().map(|p| model.kernel_sum(p)).collect();
        assert!(common::kkt_gap(&dense, &ours_g, ub) <= 1e-6 + 1e-12);
    }
}

#[test]
fn nu_property_on_blobs() {
    let n = 200;
    let mut r = common::rng(17);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let pts: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let c = if i % 2 == 0 { 2.0 } else { -2.0 };
            vec![c + normal.sample(&mut r), normal.sample(&mut r)]
        })
        .collect();
    let x = Matrix::from_rows(&pts).unwrap();
    for nu in [0.125, 0.25, 0.5] {
        let model = fit_ocsvm(&x, &OcsvmParams::new(nu, 0.5)).unwrap();
        let ub = model.upper_bound();
        let bounded = model.alphas.iter().filter(|&&a| a >= ub * (1.0 - 1e-9)).count() as f64 / n as f64;
        let svs = model.alphas.len() as f64 / n as f64;
        let slack = 2.0 / n as f64;
        assert!(bounded <= nu + slack, "nu {nu}: bounded fraction {bounded}");
        assert!(svs >= nu - slack, "nu {nu}: support fraction {svs}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn dual_is_feasible(
        pts in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 3), 3..25),
        nu in 0.05f64..0.95,
        gamma in 0.05f64..2.0,
    ) {
        let x = Matrix::from_rows(&pts).unwrap();
        let model = fit_ocsvm(&x, &OcsvmParams::new(nu, gamma)).unwrap();
        let sum: f64 = model.alphas.iter().sum();
        prop_assert!((sum - 1.0).abs() < 1e-9);
        let ub = model.upper_bound();
        prop_assert!(model.alphas.iter().all(|&a| a > 0.0 && a <= ub + 1e-15));
        prop_assert!(model.kkt_residual <= 1e-6);
    }
}
