//! One-class SVM with a Gaussian RBF kernel, trained by SMO on the dual.
//!
//! The dual is normalised so that the coefficients sum to one:
//!
//! ```text
//! min ½ αᵀKα   s.t.  0 ≤ α_i ≤ 1/(νn),  Σ α_i = 1
//! ```
//!
//! and the decision function is `f(x) = Σ α_i k(x_i, x) − ρ`
//! (higher means more normal).

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureBundle;
use crate::linalg::{sq_dist, Matrix};
use crate::whitening::LayerWhitener;

/// `exp(−γ‖x − y‖²)`.
#[inline]
pub fn rbf_kernel(x: &[f64], y: &[f64], gamma: f64) -> f64 {
    (-gamma * sq_dist(x, y)).exp()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OcsvmParams {
    pub nu: f64,
    pub gamma: f64,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: u64,
}

fn default_tol() -> f64 {
    1e-6
}

fn default_max_iter() -> u64 {
    10_000_000
}

impl OcsvmParams {
    pub fn new(nu: f64, gamma: f64) -> Self {
        Self {
            nu,
            gamma,
            tol: default_tol(),
            max_iter: default_max_iter(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OcsvmModel {
    pub support_vectors: Matrix,
    pub alphas: Vec<f64>,
    pub rho: f64,
    pub gamma: f64,
    pub nu: f64,
    pub n_train: usize,
    /// Maximal KKT violation `max_{up}(−G) − min_{low}(−G)` at termination.
    pub kkt_residual: f64,
    pub iterations: u64,
}

impl OcsvmModel {
    /// Upper bound on each dual coefficient, `1/(νn)`.
    pub fn upper_bound(&self) -> f64 {
        1.0 / (self.nu * self.n_train as f64)
    }

    /// `Σ α_sv k(x, sv)`, the decision value before the offset.
    pub fn kernel_sum(&self, x: &[f64]) -> f64 {
        self.support_vectors
            .iter_rows()
            .zip(&self.alphas)
            .map(|(sv, a)| a * rbf_kernel(sv, x, self.gamma))
            .sum()
    }

    /// Decision function `Σ α_sv k(x, sv) − ρ`.
    pub fn score(&self, x: &[f64]) -> f64 {
        self.kernel_sum(x) - self.rho
    }
}

/// Solve the one-class dual by pairwise (SMO) updates on the maximal violating pair.
pub fn fit_ocsvm(x: &Matrix, params: &OcsvmParams) -> Result<OcsvmModel> {
    let n = x.rows();
    let OcsvmParams {
        nu,
        gamma,
        tol,
        max_iter,
    } = *params;
    if n < 2 {
        return Err(Error::param("OCSVM needs at least two training rows"));
    }
    if !(nu > 0.0 && nu < 1.0) {
        return Err(Error::param(format!("nu = {nu} is not in (0, 1)")));
    }
    if !(gamma > 0.0) || !gamma.is_finite() {
        return Err(Error::param(format!("gamma = {gamma} must be positive")));
    }
    if !(tol > 0.0) {
        return Err(Error::param("tol must be positive"));
    }
    if !x.is_finite() {
        return Err(Error::param("training matrix has non-finite entries"));
    }

    let kernel: Vec<f64> = (0..n)
        .into_par_iter()
        .flat_map_iter(|i| {
            let xi = x.row(i);
            (0..n).map(move |j| rbf_kernel(xi, x.row(j), gamma))
        })
        .collect();
    let k = |i: usize, j: usize| kernel[i * n + j];

    let ub = 1.0 / (nu * n as f64);
    // Uniform start: feasible because 1/n < 1/(νn), and symmetric in the rows.
    let mut alpha = vec![1.0 / n as f64; n];
    let mut grad = vec![0.0; n];
    for (i, &a) in alpha.iter().enumerate() {
        if a != 0.0 {
            for (g, kv) in grad.iter_mut().zip(&kernel[i * n..(i + 1) * n]) {
                *g += a * kv;
            }
        }
    }

    let mut iterations = 0u64;
    let residual = loop {
        // i: can grow, smallest gradient. j: can shrink, largest gradient.
        let mut i_up = usize::MAX;
        let mut j_low = usize::MAX;
        for t in 0..n {
            if alpha[t] < ub && (i_up == usize::MAX || grad[t] < grad[i_up]) {
                i_up = t;
            }
            if alpha[t] > 0.0 && (j_low == usize::MAX || grad[t] > grad[j_low]) {
                j_low = t;
            }
        }
        let gap = if i_up == usize::MAX || j_low == usize::MAX {
            0.0
        } else {
            grad[j_low] - grad[i_up]
        };
        if gap <= tol {
            break gap.max(0.0);
        }
        if iterations >= max_iter {
            return Err(Error::Convergence {
                what: format!("OCSVM SMO (nu={nu}, gamma={gamma})"),
                residual: gap,
            });
        }
        iterations += 1;
        let (i, j) = (i_up, j_low);
        let eta = (k(i, i) + k(j, j) - 2.0 * k(i, j)).max(1e-12);
        let room_i = ub - alpha[i];
        let room_j = alpha[j];
        let mut delta = gap / eta;
        if delta >= room_i {
            delta = room_i;
        }
        if delta >= room_j {
            delta = room_j;
        }
        alpha[i] = if delta == room_i { ub } else { alpha[i] + delta };
        alpha[j] = if delta == room_j { 0.0 } else { alpha[j] - delta };
        let (ri, rj) = (&kernel[i * n..(i + 1) * n], &kernel[j * n..(j + 1) * n]);
        for ((g, a), b) in grad.iter_mut().zip(ri).zip(rj) {
            *g += delta * (a - b);
        }
    };

    let free: Vec<f64> = (0..n)
        .filter(|&t| alpha[t] > 0.0 && alpha[t] < ub)
        .map(|t| grad[t])
        .collect();
    let rho = if !free.is_empty() {
        free.iter().sum::<f64>() / free.len() as f64
    } else {
        let mut sv: Vec<f64> = (0..n).filter(|&t| alpha[t] > 0.0).map(|t| grad[t]).collect();
        sv.sort_by(f64::total_cmp);
        let m = sv.len();
        if m % 2 == 1 {
            sv[m / 2]
        } else {
            0.5 * (sv[m / 2 - 1] + sv[m / 2])
        }
    };

    let sv_idx: Vec<usize> = (0..n).filter(|&t| alpha[t] > 0.0).collect();
    Ok(OcsvmModel {
        support_vectors: x.select_rows(&sv_idx),
        alphas: sv_idx.iter().map(|&t| alpha[t]).collect(),
        rho,
        gamma,
        nu,
        n_train: n,
        kkt_residual: residual,
        iterations,
    })
}

pub fn ocsvm_score(model: &OcsvmModel, x_whitened: &[f64]) -> f64 {
    model.score(x_whitened)
}

/// Score matrix `O` (`n × L`): whiten each layer with the predicted class, then score.
pub fn ocsvm_layer_scores(
    whiteners: &[LayerWhitener],
    models: &[OcsvmModel],
    bundle: &FeatureBundle,
) -> Result<Matrix> {
    let l = bundle.n_layers();
    if whiteners.len() != l || models.len() != l {
        return Err(Error::param(format!(
            "{} whiteners and {} models for a bundle of {l} layers",
            whiteners.len(),
            models.len()
        )));
    }
    let n = bundle.n_examples();
    let preds = bundle.predicted_labels();
    let mut out = Matrix::zeros(n, l);
    for layer in 0..l {
        let col: Vec<f64> = (0..n)
            .into_par_iter()
            .map(|i| {
                let z = whiteners[layer].whiten(bundle.layer(layer).row(i), preds[i])?;
                Ok(models[layer].score(&z))
            })
            .collect::<Result<_>>()?;
        for (i, v) in col.into_iter().enumerate() {
            out[(i, layer)] = v;
        }
    }
    Ok(out)
}
