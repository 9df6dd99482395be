//! L2-regularised logistic regression on z-scored score features, fitted by
//! damped Newton iterations with the penalty strength chosen by stratified
//! cross-validation.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::auroc;
use super::scores::LabeledScoreSet;
use crate::error::{Error, Result};
use crate::linalg::{dot, Matrix, SpdFactor};
use crate::rng;

pub const GRAD_TOL: f64 = 1e-8;
pub const MAX_NEWTON_ITER: usize = 200;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LogisticOptions {
    #[serde(default = "default_folds")]
    pub folds: usize,
    #[serde(default = "default_reg_grid")]
    pub reg_grid: Vec<f64>,
}

fn default_folds() -> usize {
    5
}

fn default_reg_grid() -> Vec<f64> {
    vec![1e-3, 1e-2, 1e-1, 1.0, 10.0]
}

impl Default for LogisticOptions {
    fn default() -> Self {
        Self {
            folds: default_folds(),
            reg_grid: default_reg_grid(),
        }
    }
}

impl LogisticOptions {
    pub fn validate(&self) -> Result<()> {
        if self.folds < 2 {
            return Err(Error::param("at least two folds are required"));
        }
        if self.reg_grid.is_empty() || self.reg_grid.iter().any(|r| !(*r > 0.0) || !r.is_finite()) {
            return Err(Error::param("regularisation grid must be non-empty and positive"));
        }
        Ok(())
    }
}

/// Mean out-of-fold AUROC for one grid value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvPoint {
    pub regularization: f64,
    pub mean_auroc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogisticModel {
    pub beta0: f64,
    pub beta: Vec<f64>,
    pub zmeans: Vec<f64>,
    pub zstds: Vec<f64>,
    /// Columns that were constant in training (their std was replaced by 1).
    pub constant_columns: Vec<usize>,
    pub feature_names: Vec<String>,
    pub cv_regularization: f64,
    pub cv: Vec<CvPoint>,
    pub grad_norm: f64,
}

impl LogisticModel {
    pub fn n_features(&self) -> usize {
        self.beta.len()
    }

    /// Linear predictor `b + w·z` on raw (un-standardised) features.
    pub fn margin(&self, row: &[f64]) -> f64 {
        let z: f64 = row
            .iter()
            .zip(&self.zmeans)
            .zip(&self.zstds)
            .zip(&self.beta)
            .map(|(((x, m), s), w)| w * (x - m) / s)
            .sum();
        self.beta0 + z
    }
}

/// Numerically stable `1 / (1 + e^{−t})`.
pub fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^t)` without overflow.
fn softplus(t: f64) -> f64 {
    if t > 0.0 {
        t + (-t).exp().ln_1p()
    } else {
        t.exp().ln_1p()
    }
}

/// Probability that the row is adversarial.
pub fn posterior(model: &LogisticModel, row: &[f64]) -> f64 {
    sigmoid(model.margin(row))
}

/// Adversarial iff the posterior is strictly above ½; returns the posterior as confidence.
pub fn classify(model: &LogisticModel, row: &[f64]) -> (bool, f64) {
    let p = posterior(model, row);
    (p > 0.5, p)
}

/// Column means and standard deviations (population); zero stds become 1.
pub fn zscore_stats(x: &Matrix) -> (Vec<f64>, Vec<f64>, Vec<usize>) {
    let n = x.rows() as f64;
    let mut means = vec![0.0; x.cols()];
    let mut stds = vec![0.0; x.cols()];
    let mut constant = Vec::new();
    for j in 0..x.cols() {
        let col = x.column(j);
        let m = col.iter().sum::<f64>() / n;
        let v = col.iter().map(|c| (c - m) * (c - m)).sum::<f64>() / n;
        means[j] = m;
        stds[j] = if v > 0.0 && v.sqrt() > 0.0 {
            v.sqrt()
        } else {
            constant.push(j);
            1.0
        };
    }
    (means, stds, constant)
}

/// Apply column z-scores from [`zscore_stats`].
pub fn standardise(x: &Matrix, means: &[f64], stds: &[f64]) -> Matrix {
    let mut z = x.clone();
    for i in 0..z.rows() {
        for (j, v) in z.row_mut(i).iter_mut().enumerate() {
            *v = (*v - means[j]) / stds[j];
        }
    }
    z
}

/// `1/n Σ [log(1 + e^η) − y·η] + λ/2 ‖w‖²`, intercept unpenalised.
/// `theta = [b, w…]`.
pub fn penalized_objective(z: &Matrix, y: &[bool], lambda: f64, theta: &[f64]) -> f64 {
    let n = z.rows() as f64;
    let nll: f64 = z
        .iter_rows()
        .zip(y)
        .map(|(r, &yi)| {
            let eta = theta[0] + dot(&theta[1..], r);
            softplus(eta) - if yi { eta } else { 0.0 }
        })
        .sum();
    nll / n + 0.5 * lambda * dot(&theta[1..], &theta[1..])
}

/// Gradient of [`penalized_objective`].
pub fn penalized_gradient(z: &Matrix, y: &[bool], lambda: f64, theta: &[f64]) -> Vec<f64> {
    let n = z.rows() as f64;
    let mut g = vec![0.0; theta.len()];
    for (r, &yi) in z.iter_rows().zip(y) {
        let resid = sigmoid(theta[0] + dot(&theta[1..], r)) - if yi { 1.0 } else { 0.0 };
        g[0] += resid;
        for (gj, x) in g[1..].iter_mut().zip(r) {
            *gj += resid * x;
        }
    }
    for (j, gj) in g.iter_mut().enumerate() {
        *gj /= n;
        if j > 0 {
            *gj += lambda * theta[j];
        }
    }
    g
}

fn hessian(z: &Matrix, lambda: f64, theta: &[f64]) -> Matrix {
    let p = theta.len();
    let n = z.rows() as f64;
    let mut h = Matrix::zeros(p, p);
    let mut xa = vec![1.0; p];
    for r in z.iter_rows() {
        xa[1..].copy_from_slice(r);
        let s = sigmoid(theta[0] + dot(&theta[1..], r));
        let w = s * (1.0 - s);
        if w == 0.0 {
            continue;
        }
        for a in 0..p {
            let wa = w * xa[a];
            for b in a..p {
                h[(a, b)] += wa * xa[b];
            }
        }
    }
    for a in 0..p {
        for b in a..p {
            let mut v = h[(a, b)] / n;
            if a == b && a > 0 {
                v += lambda;
            }
            h[(a, b)] = v;
            h[(b, a)] = v;
        }
    }
    h
}

/// Minimise the penalised objective on already standardised features.
/// Returns `(theta, ‖grad‖)`.
pub fn newton_fit(z: &Matrix, y: &[bool], lambda: f64) -> Result<(Vec<f64>, f64)> {
    let p = z.cols() + 1;
    let mut theta = vec![0.0; p];
    let mut f = penalized_objective(z, y, lambda, &theta);
    let mut g = penalized_gradient(z, y, lambda, &theta);
    for _ in 0..MAX_NEWTON_ITER {
        let gnorm = dot(&g, &g).sqrt();
        if gnorm <= GRAD_TOL {
            return Ok((theta, gnorm));
        }
        let mut h = hessian(z, lambda, &theta);
        // A saturated intercept direction can make H singular; a tiny ridge keeps it solvable.
        let factor = SpdFactor::new(&h).or_else(|| {
            for a in 0..p {
                h[(a, a)] += 1e-10;
            }
            SpdFactor::new(&h)
        });
        let step = match factor {
            Some(fct) => fct.solve(&g),
            None => g.clone(),
        };
        let slope = dot(&g, &step);
        // Once the predicted decrease is below rounding of f, backtracking can
        // only shrink the step towards a no-op; the full step is quadratically convergent.
        let tiny = slope <= 1e-13 * f.abs().max(1.0);
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..if tiny { 0 } else { 40 } {
            let cand: Vec<f64> = theta.iter().zip(&step).map(|(a, d)| a - t * d).collect();
            let fc = penalized_objective(z, y, lambda, &cand);
            if fc < f && fc <= f - 1e-4 * t * slope {
                accepted = Some((cand, fc));
                break;
            }
            t *= 0.5;
        }
        let (cand, fc) = accepted.unwrap_or_else(|| {
            // Near the optimum rounding hides the decrease; take the full step.
            let cand: Vec<f64> = theta.iter().zip(&step).map(|(a, d)| a - d).collect();
            let fc = penalized_objective(z, y, lambda, &cand);
            (cand, fc)
        });
        theta = cand;
        f = fc;
        g = penalized_gradient(z, y, lambda, &theta);
    }
    let gnorm = dot(&g, &g).sqrt();
    if gnorm <= GRAD_TOL {
        return Ok((theta, gnorm));
    }
    Err(Error::Convergence {
        what: format!("logistic Newton (lambda={lambda})"),
        residual: gnorm,
    })
}

/// Fit on all rows at a fixed regularisation strength.
pub fn fit_logistic_fixed(set: &LabeledScoreSet, lambda: f64) -> Result<LogisticModel> {
    check_labels(set.labels())?;
    let (zmeans, zstds, constant_columns) = zscore_stats(set.features());
    let z = standardise(set.features(), &zmeans, &zstds);
    let (theta, grad_norm) = newton_fit(&z, set.labels(), lambda)?;
    Ok(LogisticModel {
        beta0: theta[0],
        beta: theta[1..].to_vec(),
        zmeans,
        zstds,
        constant_columns,
        feature_names: set.feature_names().to_vec(),
        cv_regularization: lambda,
        cv: Vec::new(),
        grad_norm,
    })
}

fn check_labels(labels: &[bool]) -> Result<(usize, usize)> {
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::param("logistic fit needs both adversarial and benign rows"));
    }
    Ok((pos, neg))
}

/// Stratified fold assignment: each class is shuffled and dealt round-robin.
pub fn stratified_folds(labels: &[bool], folds: usize, seed: u64) -> Vec<usize> {
    let mut r = rng::substream(seed, "logistic/folds");
    let mut assign = vec![0; labels.len()];
    for class in [true, false] {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        idx.shuffle(&mut r);
        for (k, i) in idx.into_iter().enumerate() {
            assign[i] = k % folds;
        }
    }
    assign
}

/// Cross-validated fit: choose the strength by mean out-of-fold AUROC (ties go
/// to the strongest regularisation), then refit on every row.
///
/// When a class has fewer rows than `opts.folds`, the fold count shrinks to
/// that class size.
pub fn fit_logistic(set: &LabeledScoreSet, opts: &LogisticOptions, seed: u64) -> Result<LogisticModel> {
    opts.validate()?;
    let (pos, neg) = check_labels(set.labels())?;
    let folds = opts.folds.min(pos).min(neg);
    if folds < 2 {
        return Err(Error::param(
            "cross-validation needs at least two rows of each class",
        ));
    }
    let assign = stratified_folds(set.labels(), folds, seed);
    let cv: Vec<CvPoint> = opts
        .reg_grid
        .par_iter()
        .map(|&lambda| {
            let mut total = 0.0;
            for f in 0..folds {
                let tr: Vec<usize> = (0..assign.len()).filter(|&i| assign[i] != f).collect();
                let va: Vec<usize> = (0..assign.len()).filter(|&i| assign[i] == f).collect();
                let model = fit_logistic_fixed(&set.subset(&tr)?, lambda)?;
                let scores: Vec<f64> = va
                    .iter()
                    .map(|&i| model.margin(set.features().row(i)))
                    .collect();
                let labels: Vec<bool> = va.iter().map(|&i| set.labels()[i]).collect();
                total += auroc(&scores, &labels)?;
            }
            Ok(CvPoint {
                regularization: lambda,
                mean_auroc: total / folds as f64,
            })
        })
        .collect::<Result<_>>()?;
    let best = cv
        .iter()
        .fold(None::<&CvPoint>, |acc, p| match acc {
            None => Some(p),
            Some(b) if p.mean_auroc > b.mean_auroc => Some(p),
            Some(b) if p.mean_auroc == b.mean_auroc && p.regularization > b.regularization => Some(p),
            keep => keep,
        })
        .expect("grid is non-empty");
    let mut model = fit_logistic_fixed(set, best.regularization)?;
    model.cv = cv.clone();
    Ok(model)
}
