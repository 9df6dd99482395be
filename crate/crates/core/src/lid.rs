//! Local intrinsic dimensionality scores from k-nearest-neighbour distances.
//!
//! ```text
//! LID(h) = −( 1/k Σ_i log(r_i / r_k) )⁻¹
//! ```
//!
//! where `r_1 ≤ … ≤ r_k` are Euclidean distances from `h` to its nearest
//! reference rows. Higher values indicate more adversarial inputs.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ensemble::scores::DetectorScoresPart;
use crate::ensemble::{auroc, fit_logistic, posterior, LogisticOptions};
use crate::error::{Error, Result};
use crate::hyperopt::{select_grid, GridSelection};
use crate::features::FeatureBundle;
use crate::linalg::{sq_dist, Matrix};

/// Per-layer activations of the normal reference examples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LidReference {
    layers: Vec<Matrix>,
    k: usize,
}

impl LidReference {
    pub fn new(layers: Vec<Matrix>, k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::param("k must be at least 1"));
        }
        if layers.is_empty() {
            return Err(Error::param("reference needs at least one layer"));
        }
        for (l, m) in layers.iter().enumerate() {
            if m.rows() < k + 1 {
                return Err(Error::param(format!(
                    "reference layer {l} has {} rows; k = {k} needs at least {}",
                    m.rows(),
                    k + 1
                )));
            }
        }
        Ok(Self { layers, k })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn layers(&self) -> &[Matrix] {
        &self.layers
    }

    pub fn n_rows(&self) -> usize {
        self.layers[0].rows()
    }

    pub fn with_k(&self, k: usize) -> Result<Self> {
        Self::new(self.layers.clone(), k)
    }
}

/// MLE of the local intrinsic dimensionality of `h` against `reference`.
///
/// A reference row at distance exactly zero is taken to be `h` itself and is
/// skipped once. Returns `f64::INFINITY` when the estimate is degenerate
/// (all `k` distances equal).
pub fn lid_score(reference: &Matrix, h: &[f64], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::param("k must be at least 1"));
    }
    if h.len() != reference.cols() {
        return Err(Error::param(format!(
            "activation has length {}, reference rows have {}",
            h.len(),
            reference.cols()
        )));
    }
    if h.iter().any(|v| !v.is_finite()) {
        return Err(Error::param("activation has non-finite entries"));
    }
    let mut d: Vec<(f64, usize)> = reference
        .iter_rows()
        .enumerate()
        .map(|(i, r)| (sq_dist(r, h), i))
        .collect();
    let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    let skip = usize::from(d.iter().any(|(v, _)| *v == 0.0));
    let need = k + skip;
    if d.len() < need {
        return Err(Error::param(format!(
            "only {} usable reference rows for k = {k}",
            d.len() - skip
        )));
    }
    if need < d.len() {
        d.select_nth_unstable_by(need - 1, cmp);
        d.truncate(need);
    }
    d.sort_by(cmp);
    let r: Vec<f64> = d[skip..].iter().map(|(v, _)| v.sqrt()).collect();
    let r_max = r[k - 1];
    let mean_log: f64 = r.iter().map(|ri| (ri / r_max).ln()).sum::<f64>() / k as f64;
    if !(mean_log < 0.0) {
        return Ok(f64::INFINITY);
    }
    Ok(-1.0 / mean_log)
}

/// Score matrix `L` (`n × L`).
pub fn lid_layer_scores(reference: &LidReference, bundle: &FeatureBundle) -> Result<Matrix> {
    if reference.layers.len() != bundle.n_layers() {
        return Err(Error::param(format!(
            "reference has {} layers, bundle has {}",
            reference.layers.len(),
            bundle.n_layers()
        )));
    }
    let n = bundle.n_examples();
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            reference
                .layers
                .iter()
                .enumerate()
                .map(|(l, refm)| lid_score(refm, bundle.layer(l).row(i), reference.k))
                .collect()
        })
        .collect::<Result<_>>()?;
    if rows.is_empty() {
        return Ok(Matrix::zeros(0, bundle.n_layers()));
    }
    Matrix::from_rows(&rows)
}

/// Replace `+∞` sentinels by the largest finite value of their column
/// (0 if the column has none). Returns the number of replaced entries.
pub fn resolve_sentinels(scores: &mut Matrix) -> usize {
    let mut replaced = 0;
    for j in 0..scores.cols() {
        let col = scores.column(j);
        let fill = col
            .iter()
            .copied()
            .filter(|v| v.is_finite())
            .fold(None, |m: Option<f64>, v| Some(m.map_or(v, |m| m.max(v))))
            .unwrap_or(0.0);
        for i in 0..scores.rows() {
            if !scores[(i, j)].is_finite() {
                scores[(i, j)] = fill;
                replaced += 1;
            }
        }
    }
    replaced
}

/// Candidate neighbour counts.
pub const K_GRID: [usize; 9] = [10, 20, 30, 40, 50, 60, 70, 80, 90];

/// Everything needed to score one k candidate.
pub struct KSelection<'a> {
    /// Reference activations per layer.
    pub reference: &'a [Matrix],
    pub train: &'a FeatureBundle,
    pub train_adv: &'a [bool],
    pub valid: &'a FeatureBundle,
    pub valid_adv: &'a [bool],
    pub logistic: &'a LogisticOptions,
    pub seed: u64,
}

/// Pick k by validation AUROC of a logistic model fitted on training scores.
/// Candidates larger than the reference size − 1 are skipped; ties go to the smaller k.
pub fn select_k(candidates: &[usize], ctx: &KSelection<'_>) -> Result<GridSelection<usize>> {
    let n_ref = ctx.reference.iter().map(Matrix::rows).min().unwrap_or(0);
    select_grid(candidates, |k| {
        if k == 0 || k + 1 > n_ref {
            log::warn!("skipping k = {k}: reference has {n_ref} rows");
            return Ok(None);
        }
        let reference = LidReference::new(ctx.reference.to_vec(), k)?;
        let mut train = lid_layer_scores(&reference, ctx.train)?;
        let mut valid = lid_layer_scores(&reference, ctx.valid)?;
        resolve_sentinels(&mut train);
        resolve_sentinels(&mut valid);
        let set = DetectorScoresPart::new("L", train).labeled(ctx.train_adv)?;
        let model = fit_logistic(&set, ctx.logistic, ctx.seed)?;
        let post: Vec<f64> = valid.iter_rows().map(|r| posterior(&model, r)).collect();
        Ok(Some(auroc(&post, ctx.valid_adv)?))
    })
}
