//! Hyperparameter search: Gaussian-process Bayesian optimisation for the
//! OCSVM `(ν, γ)` pair and exhaustive grid selection for scalar knobs.
//!
//! The optimiser works in the unit cube. Log2-continuous dimensions map
//! `u ∈ [0, 1]` to `2^(lo + u·(hi − lo))`; categorical dimensions snap `u` to
//! the nearest of `len` evenly spaced anchors.

use std::io::Write;
use std::time::Instant;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{Matrix, SpdFactor};
use crate::ocsvm::{fit_ocsvm, OcsvmParams};
use crate::rng;

/// Diagonal jitter added to the GP covariance.
pub const GP_JITTER: f64 = 1e-6;
const N_CANDIDATES: usize = 256;
const N_REFINE: usize = 16;
const LENGTHSCALES: [f64; 8] = [0.05, 0.1, 0.2, 0.35, 0.5, 0.75, 1.0, 1.5];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DimKind {
    /// Exponents `lo < hi`; values are `2^e`.
    Log2Continuous { lo: f64, hi: f64 },
    Categorical { values: Vec<f64> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dim {
    pub name: String,
    #[serde(flatten)]
    pub kind: DimKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    dims: Vec<Dim>,
}

impl SearchSpace {
    pub fn new(dims: Vec<Dim>) -> Result<Self> {
        if dims.is_empty() {
            return Err(Error::param("search space has no dimensions"));
        }
        for d in &dims {
            match &d.kind {
                DimKind::Log2Continuous { lo, hi } => {
                    if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
                        return Err(Error::param(format!("dimension {}: need lo < hi", d.name)));
                    }
                }
                DimKind::Categorical { values } => {
                    if values.is_empty() || values.iter().any(|v| !v.is_finite()) {
                        return Err(Error::param(format!(
                            "dimension {}: categorical values must be finite and non-empty",
                            d.name
                        )));
                    }
                }
            }
        }
        Ok(Self { dims })
    }

    /// `ν ∈ [2⁻⁷, 2⁻¹]`, `γ ∈ [2⁻¹⁵, 2⁵]`, searched continuously on the log2 scale.
    pub fn ocsvm() -> Self {
        Self {
            dims: vec![
                Dim {
                    name: "nu".into(),
                    kind: DimKind::Log2Continuous { lo: -7.0, hi: -1.0 },
                },
                Dim {
                    name: "gamma".into(),
                    kind: DimKind::Log2Continuous { lo: -15.0, hi: 5.0 },
                },
            ],
        }
    }

    /// The same box restricted to integer powers of two.
    pub fn ocsvm_grid() -> Self {
        let pow = |lo: i32, hi: i32| (lo..=hi).map(|e| 2f64.powi(e)).collect();
        Self {
            dims: vec![
                Dim {
                    name: "nu".into(),
                    kind: DimKind::Categorical { values: pow(-7, -1) },
                },
                Dim {
                    name: "gamma".into(),
                    kind: DimKind::Categorical { values: pow(-15, 5) },
                },
            ],
        }
    }

    pub fn dims(&self) -> &[Dim] {
        &self.dims
    }

    pub fn names(&self) -> Vec<String> {
        self.dims.iter().map(|d| d.name.clone()).collect()
    }

    /// Snap categorical coordinates to their anchors and clamp to the cube.
    pub fn snap(&self, unit: &mut [f64]) {
        for (u, d) in unit.iter_mut().zip(&self.dims) {
            *u = u.clamp(0.0, 1.0);
            if let DimKind::Categorical { values } = &d.kind {
                *u = if values.len() == 1 {
                    0.5
                } else {
                    let m = (values.len() - 1) as f64;
                    (*u * m).round() / m
                };
            }
        }
    }

    /// Parameter values at a (snapped) unit-cube point.
    pub fn decode(&self, unit: &[f64]) -> Vec<f64> {
        unit.iter()
            .zip(&self.dims)
            .map(|(&u, d)| match &d.kind {
                DimKind::Log2Continuous { lo, hi } => (lo + u * (hi - lo)).exp2(),
                DimKind::Categorical { values } => {
                    let i = ((u * (values.len() - 1) as f64).round() as usize).min(values.len() - 1);
                    values[i]
                }
            })
            .collect()
    }

    /// Whether `params` lies inside the declared space.
    pub fn contains(&self, params: &[f64]) -> bool {
        params.len() == self.dims.len()
            && params.iter().zip(&self.dims).all(|(&p, d)| match &d.kind {
                DimKind::Log2Continuous { lo, hi } => {
                    let e = p.log2();
                    e >= lo - 1e-12 && e <= hi + 1e-12
                }
                DimKind::Categorical { values } => values.contains(&p),
            })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub params: Vec<f64>,
    /// Unit-cube coordinates the GP saw.
    pub unit: Vec<f64>,
    pub objective: f64,
    pub failed: bool,
    /// Expected improvement that selected this point (`None` for initial design).
    pub acquisition: Option<f64>,
    /// Wall time of the evaluation; kept out of JSON so serialised logs are reproducible.
    #[serde(skip)]
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialLog {
    pub names: Vec<String>,
    pub trials: Vec<Trial>,
    pub best: usize,
}

impl TrialLog {
    pub fn best_trial(&self) -> &Trial {
        &self.trials[self.best]
    }

    /// Same points and objectives, ignoring wall times.
    pub fn same_trials(&self, other: &TrialLog) -> bool {
        self.names == other.names
            && self.best == other.best
            && self.trials.len() == other.trials.len()
            && self.trials.iter().zip(&other.trials).all(|(a, b)| {
                a.params == b.params
                    && a.objective.to_bits() == b.objective.to_bits()
                    && a.failed == b.failed
            })
    }

    /// CSV with one row per trial: parameters, objective, failure flag, seconds.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let mut header = self.names.clone();
        header.extend(["objective", "failed", "seconds"].map(String::from));
        let csv_err = |e: csv::Error| Error::Format(crate::error::FormatError::Csv(e.to_string()));
        out.write_record(&header).map_err(csv_err)?;
        for t in &self.trials {
            let mut rec: Vec<String> = t.params.iter().map(|p| p.to_string()).collect();
            rec.push(t.objective.to_string());
            rec.push(t.failed.to_string());
            rec.push(format!("{:.6}", t.seconds));
            out.write_record(&rec).map_err(csv_err)?;
        }
        out.flush()
            .map_err(|e| Error::Format(crate::error::FormatError::Csv(e.to_string())))
    }
}

fn matern52(a: &[f64], b: &[f64], lengthscale: f64) -> f64 {
    let r = crate::linalg::sq_dist(a, b).sqrt() / lengthscale;
    let s = 5f64.sqrt() * r;
    (1.0 + s + s * s / 3.0) * (-s).exp()
}

/// Zero-mean, unit-variance GP over standardised targets.
pub struct GaussianProcess {
    x: Vec<Vec<f64>>,
    factor: SpdFactor,
    alpha: Vec<f64>,
    pub lengthscale: f64,
    pub log_marginal_likelihood: f64,
    y_mean: f64,
    y_std: f64,
}

impl GaussianProcess {
    /// Fit with the lengthscale chosen from a fixed grid by marginal likelihood.
    /// Returns `None` if the targets are constant (nothing to model).
    pub fn fit(x: &[Vec<f64>], y: &[f64]) -> Option<Self> {
        let n = y.len() as f64;
        let y_mean = y.iter().sum::<f64>() / n;
        let var = y.iter().map(|v| (v - y_mean) * (v - y_mean)).sum::<f64>() / n;
        if !(var > 0.0) {
            return None;
        }
        let y_std = var.sqrt();
        let ys: Vec<f64> = y.iter().map(|v| (v - y_mean) / y_std).collect();
        LENGTHSCALES
            .iter()
            .filter_map(|&ls| Self::fit_with(x, &ys, ls, y_mean, y_std))
            .fold(None, |best: Option<Self>, gp| match best {
                Some(b) if b.log_marginal_likelihood >= gp.log_marginal_likelihood => Some(b),
                _ => Some(gp),
            })
    }

    /// Fit at a fixed lengthscale. `None` for constant targets or a singular covariance.
    pub fn fit_fixed(x: &[Vec<f64>], y: &[f64], lengthscale: f64) -> Option<Self> {
        let n = y.len() as f64;
        let y_mean = y.iter().sum::<f64>() / n;
        let var = y.iter().map(|v| (v - y_mean) * (v - y_mean)).sum::<f64>() / n;
        if !(var > 0.0) {
            return None;
        }
        let y_std = var.sqrt();
        let ys: Vec<f64> = y.iter().map(|v| (v - y_mean) / y_std).collect();
        Self::fit_with(x, &ys, lengthscale, y_mean, y_std)
    }

    fn fit_with(x: &[Vec<f64>], ys: &[f64], ls: f64, y_mean: f64, y_std: f64) -> Option<Self> {
        let n = x.len();
        let mut k = Matrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                k[(i, j)] = matern52(&x[i], &x[j], ls) + if i == j { GP_JITTER } else { 0.0 };
            }
        }
        let factor = SpdFactor::new(&k)?;
        let alpha = factor.solve(ys);
        let fit: f64 = ys.iter().zip(&alpha).map(|(a, b)| a * b).sum();
        let lml = -0.5 * fit - 0.5 * factor.log_det() - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln();
        Some(Self {
            x: x.to_vec(),
            factor,
            alpha,
            lengthscale: ls,
            log_marginal_likelihood: lml,
            y_mean,
            y_std,
        })
    }

    /// Posterior mean and standard deviation in standardised units.
    fn predict_std(&self, p: &[f64]) -> (f64, f64) {
        let ks: Vec<f64> = self.x.iter().map(|xi| matern52(xi, p, self.lengthscale)).collect();
        let mean: f64 = ks.iter().zip(&self.alpha).map(|(a, b)| a * b).sum();
        let v = self.factor.solve(&ks);
        let var = 1.0 + GP_JITTER - ks.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>();
        (mean, var.max(0.0).sqrt())
    }

    /// Posterior mean and standard deviation in objective units.
    pub fn predict(&self, p: &[f64]) -> (f64, f64) {
        let (m, s) = self.predict_std(p);
        (self.y_mean + self.y_std * m, self.y_std * s)
    }

    fn standardise(&self, y: f64) -> f64 {
        (y - self.y_mean) / self.y_std
    }
}

fn normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / std::f64::consts::SQRT_2)
}

fn normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Expected improvement over `best` (standardised units) for maximisation.
pub fn expected_improvement(mean: f64, sd: f64, best: f64) -> f64 {
    let gain = mean - best;
    if sd < 1e-12 {
        return gain.max(0.0);
    }
    let z = gain / sd;
    (gain * normal_cdf(z) + sd * normal_pdf(z)).max(0.0)
}

/// Maximise `objective` over `space` with `budget` evaluations.
///
/// Non-finite objective values mark the trial failed and record
/// `worst-so-far − 1` (or `−1` when nothing has succeeded yet).
pub fn bayes_optimize<F>(mut objective: F, space: &SearchSpace, budget: usize, seed: u64) -> Result<TrialLog>
where
    F: FnMut(&[f64]) -> f64,
{
    if budget < 3 {
        return Err(Error::param("optimisation budget must be at least 3"));
    }
    let d = space.dims().len();
    let n_init = (budget / 5).max(5).min(budget);
    let mut log = TrialLog {
        names: space.names(),
        trials: Vec::with_capacity(budget),
        best: 0,
    };

    // Latin hypercube: each axis split into n_init strata, one point per stratum.
    let mut r = rng::substream(seed, "bo/init");
    let mut design = vec![vec![0.0; d]; n_init];
    for j in 0..d {
        let mut strata: Vec<usize> = (0..n_init).collect();
        rand::seq::SliceRandom::shuffle(strata.as_mut_slice(), &mut r);
        for (row, s) in design.iter_mut().zip(strata) {
            row[j] = (s as f64 + r.random::<f64>()) / n_init as f64;
        }
    }

    let mut evaluate = |unit: Vec<f64>, acquisition: Option<f64>, log: &mut TrialLog| {
        let params = space.decode(&unit);
        let start = Instant::now();
        let value = objective(&params);
        let seconds = start.elapsed().as_secs_f64();
        let failed = !value.is_finite();
        let objective = if failed {
            log.trials
                .iter()
                .filter(|t| !t.failed)
                .map(|t| t.objective)
                .reduce(f64::min)
                .map_or(-1.0, |w| w - 1.0)
        } else {
            value
        };
        log.trials.push(Trial {
            params,
            unit,
            objective,
            failed,
            acquisition,
            seconds,
        });
    };

    for mut unit in design {
        space.snap(&mut unit);
        evaluate(unit, None, &mut log);
    }

    for t in n_init..budget {
        let x: Vec<Vec<f64>> = log.trials.iter().map(|t| t.unit.clone()).collect();
        let y: Vec<f64> = log.trials.iter().map(|t| t.objective).collect();
        let mut r = rng::substream(seed, &format!("bo/acq/{t}"));
        let draw = |r: &mut rng::Rng| {
            let mut u: Vec<f64> = (0..d).map(|_| r.random::<f64>()).collect();
            space.snap(&mut u);
            u
        };
        let (unit, ei) = match GaussianProcess::fit(&x, &y) {
            None => (draw(&mut r), 0.0),
            Some(gp) => {
                let best = y.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let best = gp.standardise(best);
                let acq = |u: &[f64]| {
                    let (m, s) = gp.predict_std(u);
                    expected_improvement(m, s, best)
                };
                let mut top = draw(&mut r);
                let mut top_ei = acq(&top);
                for _ in 1..N_CANDIDATES {
                    let c = draw(&mut r);
                    let e = acq(&c);
                    if e > top_ei {
                        top = c;
                        top_ei = e;
                    }
                }
                let mut step = 0.05;
                for _ in 0..N_REFINE {
                    let mut c: Vec<f64> = top
                        .iter()
                        .map(|&u| {
                            let z: f64 = StandardNormal.sample(&mut r);
                            u + step * z
                        })
                        .collect();
                    space.snap(&mut c);
                    let e = acq(&c);
                    if e > top_ei {
                        top = c;
                        top_ei = e;
                    } else {
                        step *= 0.7;
                    }
                }
                (top, top_ei)
            }
        };
        evaluate(unit, Some(ei), &mut log);
    }

    if log.trials.iter().all(|t| t.failed) {
        return Err(Error::Fit(format!(
            "all {} optimisation trials failed",
            log.trials.len()
        )));
    }
    log.best = (0..log.trials.len())
        .reduce(|b, i| {
            if log.trials[i].objective > log.trials[b].objective {
                i
            } else {
                b
            }
        })
        .expect("budget >= 3");
    Ok(log)
}

/// Threshold `t` maximising training accuracy of the rule "adversarial iff
/// score < t", scanned over midpoints between consecutive distinct scores
/// (plus one point beyond each end). The first maximiser wins.
pub fn fit_threshold(scores: &[f64], adv: &[bool]) -> Result<f64> {
    if scores.len() != adv.len() || scores.is_empty() {
        return Err(Error::param("threshold fit needs one label per score"));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::param("threshold fit needs finite scores"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let n_adv = adv.iter().filter(|&&a| a).count();
    // Nothing below the first threshold: all benign are correct.
    let mut correct = (adv.len() - n_adv) as isize;
    let lo = scores[order[0]];
    let hi = scores[order[order.len() - 1]];
    let mut best_t = lo - 1.0;
    let mut best = correct;
    let mut i = 0;
    while i < order.len() {
        let v = scores[order[i]];
        while i < order.len() && scores[order[i]] == v {
            correct += if adv[order[i]] { 1 } else { -1 };
            i += 1;
        }
        let t = if i < order.len() {
            0.5 * (v + scores[order[i]])
        } else {
            hi + 1.0
        };
        if correct > best {
            best = correct;
            best_t = t;
        }
    }
    Ok(best_t)
}

/// Accuracy of "adversarial iff score < t".
pub fn threshold_accuracy(scores: &[f64], adv: &[bool], t: f64) -> f64 {
    let hits = scores
        .iter()
        .zip(adv)
        .filter(|(&s, &a)| (s < t) == a)
        .count();
    hits as f64 / scores.len() as f64
}

/// Whitened rows for tuning one layer's OCSVM.
pub struct OcsvmLayerData {
    /// Rows the OCSVM is fitted on.
    pub fit: Matrix,
    /// Labelled training rows the threshold is fitted on.
    pub train: Matrix,
    pub train_adv: Vec<bool>,
    /// Labelled validation rows the objective is measured on.
    pub valid: Matrix,
    pub valid_adv: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OcsvmTuneOptions {
    #[serde(default = "default_budget")]
    pub budget: usize,
    /// Restrict the search to integer powers of two.
    #[serde(default)]
    pub grid: bool,
}

fn default_budget() -> usize {
    25
}

impl Default for OcsvmTuneOptions {
    fn default() -> Self {
        Self {
            budget: default_budget(),
            grid: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerTuning {
    pub nu: f64,
    pub gamma: f64,
    pub valid_accuracy: f64,
    pub log: TrialLog,
}

/// Validation accuracy of a thresholded single-layer OCSVM score.
pub fn ocsvm_objective(data: &OcsvmLayerData, nu: f64, gamma: f64) -> Result<f64> {
    let model = fit_ocsvm(&data.fit, &OcsvmParams::new(nu, gamma))?;
    let train: Vec<f64> = data.train.iter_rows().map(|r| model.score(r)).collect();
    let t = fit_threshold(&train, &data.train_adv)?;
    let valid: Vec<f64> = data.valid.iter_rows().map(|r| model.score(r)).collect();
    Ok(threshold_accuracy(&valid, &data.valid_adv, t))
}

/// Tune `(ν, γ)` independently for every layer; layers run in parallel.
pub fn tune_ocsvm(layers: &[OcsvmLayerData], opts: &OcsvmTuneOptions, seed: u64) -> Result<Vec<LayerTuning>> {
    let space = if opts.grid {
        SearchSpace::ocsvm_grid()
    } else {
        SearchSpace::ocsvm()
    };
    layers
        .par_iter()
        .enumerate()
        .map(|(l, data)| {
            let log = bayes_optimize(
                |p| match ocsvm_objective(data, p[0], p[1]) {
                    Ok(v) => v,
                    Err(e) => {
                        log::warn!("layer {}: OCSVM trial (nu={}, gamma={}) failed: {e}", l + 1, p[0], p[1]);
                        f64::NAN
                    }
                },
                &space,
                opts.budget,
                rng::derive_seed(seed, &format!("ocsvm/layer{}", l + 1)),
            )?;
            let best = log.best_trial();
            Ok(LayerTuning {
                nu: best.params[0],
                gamma: best.params[1],
                valid_accuracy: best.objective,
                log: log.clone(),
            })
        })
        .collect()
}

/// Result of evaluating every distinct candidate of a grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSelection<T> {
    pub best: T,
    /// `(candidate, score)`; skipped candidates have `None`.
    pub evaluated: Vec<(T, Option<f64>)>,
}

/// Evaluate each distinct candidate (ascending) and return the arg-max.
/// `eval` returns `None` to skip a candidate; ties go to the smaller candidate.
pub fn select_grid<T, F>(candidates: &[T], eval: F) -> Result<GridSelection<T>>
where
    T: Copy + PartialOrd + Send + Sync,
    F: Fn(T) -> Result<Option<f64>> + Sync,
{
    if candidates.is_empty() {
        return Err(Error::param("empty candidate list"));
    }
    let mut grid = candidates.to_vec();
    grid.sort_by(|a, b| a.partial_cmp(b).expect("candidates must be comparable"));
    grid.dedup_by(|a, b| a == b);
    let evaluated: Vec<(T, Option<f64>)> = grid
        .par_iter()
        .map(|&c| Ok((c, eval(c)?)))
        .collect::<Result<_>>()?;
    let mut best: Option<(T, f64)> = None;
    for &(c, s) in &evaluated {
        if let Some(s) = s {
            if best.is_none_or(|(_, b)| s > b) {
                best = Some((c, s));
            }
        }
    }
    let Some((best, _)) = best else {
        return Err(Error::param("every candidate was skipped"));
    };
    Ok(GridSelection { best, evaluated })
}
