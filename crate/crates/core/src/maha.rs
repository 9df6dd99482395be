//! Mahalanobis layer scores with optional input-space perturbation.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ensemble::scores::DetectorScoresPart;
use crate::ensemble::{auroc, fit_logistic, posterior, LogisticOptions};
use crate::error::{Error, Result};
use crate::hyperopt::{select_grid, GridSelection};
use crate::features::FeatureBundle;
use crate::linalg::Matrix;
use crate::refnet::{LayerHead, ScalarHead, TinyNet};
use crate::whitening::{class_statistics, floored_eigen, EIGEN_FLOOR};

/// Which class distance the layer score reports.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreHead {
    /// `M = −min_c Maha(x*, c)`: distance to the closest class.
    #[default]
    Min,
    /// `M = −max_c Maha(x*, c)`, the literal form.
    Max,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianLayerModel {
    pub class_means: Matrix,
    /// Floored pseudo-inverse of the pooled covariance.
    pub precision: Matrix,
    pub floor: f64,
}

impl GaussianLayerModel {
    pub fn fit(features: &Matrix, labels: &[usize], n_classes: usize) -> Result<Self> {
        let stats = class_statistics(features, labels, n_classes)?;
        let (vals, u) = floored_eigen(&stats.covariance)?;
        let d = features.cols();
        let mut precision = Matrix::zeros(d, d);
        for a in 0..d {
            for b in a..d {
                let v: f64 = (0..vals.len()).map(|k| u[(a, k)] * u[(b, k)] / vals[k]).sum();
                precision[(a, b)] = v;
                precision[(b, a)] = v;
            }
        }
        Ok(Self {
            class_means: stats.means,
            precision,
            floor: EIGEN_FLOOR,
        })
    }

    pub fn n_classes(&self) -> usize {
        self.class_means.rows()
    }

    pub fn dim(&self) -> usize {
        self.precision.rows()
    }

    /// `(h − μ_c)ᵀ Σ⁺ (h − μ_c)`.
    pub fn distance(&self, h: &[f64], class: usize) -> f64 {
        let diff: Vec<f64> = h
            .iter()
            .zip(self.class_means.row(class))
            .map(|(a, m)| a - m)
            .collect();
        let pd = self.precision.matvec(&diff);
        diff.iter().zip(&pd).map(|(a, b)| a * b).sum::<f64>().max(0.0)
    }

    pub fn distances(&self, h: &[f64]) -> Vec<f64> {
        (0..self.n_classes()).map(|c| self.distance(h, c)).collect()
    }

    /// Closest class; ties go to the lower index.
    pub fn nearest_class(&self, h: &[f64]) -> usize {
        let d = self.distances(h);
        let mut best = 0;
        for (c, &v) in d.iter().enumerate() {
            if v < d[best] {
                best = c;
            }
        }
        best
    }

    pub fn head_score(&self, h: &[f64], head: ScoreHead) -> f64 {
        let d = self.distances(h);
        match head {
            ScoreHead::Min => -d.iter().copied().fold(f64::INFINITY, f64::min),
            ScoreHead::Max => -d.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        }
    }

    fn check_dim(&self, h: &[f64]) -> Result<()> {
        if h.len() != self.dim() {
            return Err(Error::param(format!(
                "activation has length {}, model expects {}",
                h.len(),
                self.dim()
            )));
        }
        Ok(())
    }
}

pub fn fit_gaussian(features: &Matrix, labels: &[usize], n_classes: usize) -> Result<GaussianLayerModel> {
    GaussianLayerModel::fit(features, labels, n_classes)
}

pub fn maha_distance(model: &GaussianLayerModel, h: &[f64], class: usize) -> Result<f64> {
    model.check_dim(h)?;
    if class >= model.n_classes() {
        return Err(Error::param(format!("class {class} out of range")));
    }
    Ok(model.distance(h, class))
}

/// Mahalanobis distance to a fixed class, as a differentiable layer head.
pub struct MahaHead<'a> {
    pub model: &'a GaussianLayerModel,
    pub class: usize,
}

impl LayerHead for MahaHead<'_> {
    fn value_and_grad(&self, h: &[f64]) -> (f64, Vec<f64>) {
        let diff: Vec<f64> = h
            .iter()
            .zip(self.model.class_means.row(self.class))
            .map(|(a, m)| a - m)
            .collect();
        let pd = self.model.precision.matvec(&diff);
        let value = diff.iter().zip(&pd).map(|(a, b)| a * b).sum();
        (value, pd.into_iter().map(|v| 2.0 * v).collect())
    }
}

/// Where the layer activation comes from.
#[derive(Clone, Copy)]
pub enum MahaInput<'a> {
    /// Pre-extracted features; only `λ = 0` is possible.
    Features(&'a [f64]),
    /// An input vector and the network that produces layer activations from it.
    Network { net: &'a TinyNet, input: &'a [f64] },
}

/// Layer score `M_l(x) = −head_c Maha_l(x*, c)` with `x* = x − λ·sign(∇ₓ Maha_l(x, ĉ))`.
pub fn maha_layer_score(
    model: &GaussianLayerModel,
    layer: usize,
    source: MahaInput<'_>,
    lambda: f64,
    head: ScoreHead,
) -> Result<f64> {
    if !(lambda >= 0.0) {
        return Err(Error::param("perturbation magnitude must be >= 0"));
    }
    match source {
        MahaInput::Features(h) => {
            if lambda > 0.0 {
                return Err(Error::Config {
                    pointer: "/detectors/maha/lambdas".into(),
                    message: "input perturbation needs the network; imported features only allow lambda = 0"
                        .into(),
                });
            }
            model.check_dim(h)?;
            Ok(model.head_score(h, head))
        }
        MahaInput::Network { net, input } => {
            let fwd = net.forward(input)?;
            if layer >= net.n_hidden() {
                return Err(Error::param(format!("hidden layer {layer} does not exist")));
            }
            let h = net.layer_features(&fwd, layer);
            model.check_dim(&h)?;
            if lambda == 0.0 {
                return Ok(model.head_score(&h, head));
            }
            let c_hat = model.nearest_class(&h);
            let g = net
                .input_gradient(
                    input,
                    ScalarHead::Layer {
                        layer,
                        head: &MahaHead {
                            model,
                            class: c_hat,
                        },
                    },
                )?
                .gradient;
            let perturbed: Vec<f64> = input
                .iter()
                .zip(&g)
                .map(|(x, gi)| {
                    let s = if *gi > 0.0 {
                        1.0
                    } else if *gi < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                    x - lambda * s
                })
                .collect();
            let fwd = net.forward(&perturbed)?;
            Ok(model.head_score(&net.layer_features(&fwd, layer), head))
        }
    }
}

/// Score matrix (`n × L`) for pre-extracted features (`λ = 0`).
pub fn maha_scores_from_features(
    models: &[GaussianLayerModel],
    bundle: &FeatureBundle,
    head: ScoreHead,
) -> Result<Matrix> {
    if models.len() != bundle.n_layers() {
        return Err(Error::param("one Gaussian model per layer is required"));
    }
    let n = bundle.n_examples();
    let mut out = Matrix::zeros(n, models.len());
    for (l, m) in models.iter().enumerate() {
        let col: Vec<f64> = (0..n)
            .into_par_iter()
            .map(|i| maha_layer_score(m, l, MahaInput::Features(bundle.layer(l).row(i)), 0.0, head))
            .collect::<Result<_>>()?;
        for (i, v) in col.into_iter().enumerate() {
            out[(i, l)] = v;
        }
    }
    Ok(out)
}

/// Score matrix (`n × L`) computed through the network, allowing `λ > 0`.
pub fn maha_scores_from_inputs<X: AsRef<[f64]> + Sync>(
    models: &[GaussianLayerModel],
    net: &TinyNet,
    inputs: &[X],
    lambda: f64,
    head: ScoreHead,
) -> Result<Matrix> {
    if models.len() != net.n_hidden() {
        return Err(Error::param("one Gaussian model per hidden layer is required"));
    }
    let rows: Vec<Vec<f64>> = inputs
        .par_iter()
        .map(|x| {
            models
                .iter()
                .enumerate()
                .map(|(l, m)| {
                    maha_layer_score(
                        m,
                        l,
                        MahaInput::Network {
                            net,
                            input: x.as_ref(),
                        },
                        lambda,
                        head,
                    )
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    if rows.is_empty() {
        return Ok(Matrix::zeros(0, models.len()));
    }
    Matrix::from_rows(&rows)
}

/// Candidate perturbation magnitudes.
pub const LAMBDA_GRID: [f64; 7] = [0.0, 0.01, 0.005, 0.002, 0.0014, 0.001, 0.0005];

/// Everything needed to score one λ candidate.
pub struct LambdaSelection<'a, X> {
    pub models: &'a [GaussianLayerModel],
    pub net: &'a TinyNet,
    pub train_inputs: &'a [X],
    pub train_adv: &'a [bool],
    pub valid_inputs: &'a [X],
    pub valid_adv: &'a [bool],
    pub head: ScoreHead,
    pub logistic: &'a LogisticOptions,
    pub seed: u64,
}

/// Pick λ by validation AUROC of a logistic model fitted on training scores.
/// Ties go to the smaller λ.
pub fn select_lambda<X: AsRef<[f64]> + Sync>(
    candidates: &[f64],
    ctx: &LambdaSelection<'_, X>,
) -> Result<GridSelection<f64>> {
    if candidates.iter().any(|l| !(*l >= 0.0) || !l.is_finite()) {
        return Err(Error::param("lambda candidates must be finite and >= 0"));
    }
    select_grid(candidates, |lambda| {
        let score = |inputs: &[X]| maha_scores_from_inputs(ctx.models, ctx.net, inputs, lambda, ctx.head);
        let train = DetectorScoresPart::new("M", score(ctx.train_inputs)?);
        let valid = score(ctx.valid_inputs)?;
        let set = train.labeled(ctx.train_adv)?;
        let model = fit_logistic(&set, ctx.logistic, ctx.seed)?;
        let post: Vec<f64> = valid.iter_rows().map(|r| posterior(&model, r)).collect();
        Ok(Some(auroc(&post, ctx.valid_adv)?))
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_class_identity() -> GaussianLayerModel {
        // Class 0 around (0,0), class 1 around (1,0); scatter ±1 on each axis.
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for (c, mu) in [[0.0, 0.0], [1.0, 0.0]].iter().enumerate() {
            for d in [[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]] {
                rows.push([mu[0] + d[0] * 2f64.sqrt(), mu[1] + d[1] * 2f64.sqrt()]);
                labels.push(c);
            }
        }
        fit_gaussian(&Matrix::from_rows(&rows).unwrap(), &labels, 2).unwrap()
    }

    #[test]
    fn constructed_two_class_case() {
        let m = two_class_identity();
        assert_eq!(m.class_means.row(0), &[0.0, 0.0]);
        assert_eq!(m.class_means.row(1), &[1.0, 0.0]);
        assert!(m.precision.max_abs_diff(&Matrix::identity(2)) < 1e-12);
        assert!(maha_distance(&m, &[0.0, 0.0], 0).unwrap().abs() < 1e-15);
        let d = maha_distance(&m, &[0.3, -0.4], 0).unwrap();
        assert!((d - 0.25).abs() < 1e-12);
    }

    #[test]
    fn at_a_class_mean_the_scores_are_closed_form() {
        let m = two_class_identity();
        let h = [0.0, 0.0];
        // D = 1 between the means.
        let max = maha_layer_score(&m, 0, MahaInput::Features(&h), 0.0, ScoreHead::Max).unwrap();
        assert!((max + 1.0).abs() < 1e-12);
        let min = maha_layer_score(&m, 0, MahaInput::Features(&h), 0.0, ScoreHead::Min).unwrap();
        assert!(min.abs() < 1e-12);
    }

    #[test]
    fn lambda_without_network_is_a_config_error() {
        let m = two_class_identity();
        let r = maha_layer_score(&m, 0, MahaInput::Features(&[0.0, 0.0]), 0.01, ScoreHead::Min);
        assert!(matches!(r, Err(Error::Config { .. })));
    }

    #[test]
    fn rank_deficient_features_stay_finite() {
        let x = Matrix::from_rows(&[[1.0, 2.0], [2.0, 4.0], [3.0, 6.0], [0.0, 0.0]]).unwrap();
        let m = fit_gaussian(&x, &[0, 0, 1, 1], 2).unwrap();
        let d = maha_distance(&m, &[5.0, 10.0], 0).unwrap();
        assert!(d.is_finite());
        assert!(fit_gaussian(&x, &[0, 0, 0, 0], 2).is_err());
    }
}
