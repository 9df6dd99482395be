//! Independent reference implementations used by the integration tests.
#![allow(dead_code)]

use advdet_core::config::Config;
use advdet_core::refnet::{Activation, Dense, InputBox, TinyNet};
use advdet_core::Matrix;
use rand::Rng as _;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `P(s_adv > s_benign) + ½ P(tie)` over all pairs.
pub fn brute_auroc(scores: &[f64], labels: &[bool]) -> f64 {
    let mut num = 0.0;
    let mut pairs = 0.0;
    for (i, &si) in scores.iter().enumerate() {
        if !labels[i] {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] {
                continue;
            }
            pairs += 1.0;
            if si > sj {
                num += 1.0;
            } else if si == sj {
                num += 0.5;
            }
        }
    }
    num / pairs
}

/// Average precision over a threshold sweep: every distinct score is one
/// operating point "predict positive iff score ≥ t".
pub fn brute_aupr(scores: &[f64], labels: &[bool]) -> f64 {
    let positives = labels.iter().filter(|&&l| l).count() as f64;
    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    for t in thresholds {
        let (mut tp, mut fp) = (0.0, 0.0);
        for (s, &l) in scores.iter().zip(labels) {
            if *s >= t {
                if l {
                    tp += 1.0;
                } else {
                    fp += 1.0;
                }
            }
        }
        let recall = tp / positives;
        let precision = tp / (tp + fp);
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    ap
}

/// Euclidean projection onto `{a : Σa = 1, 0 ≤ a ≤ ub}` (exact, by breakpoints).
pub fn project_capped_simplex(v: &[f64], ub: f64) -> Vec<f64> {
    let mass = |tau: f64| v.iter().map(|x| (x - tau).clamp(0.0, ub)).sum::<f64>();
    let mut bps: Vec<f64> = v.iter().flat_map(|&x| [x, x - ub]).collect();
    bps.sort_by(f64::total_cmp);
    // mass is non-increasing in tau; find consecutive breakpoints bracketing 1.
    let mut lo = bps[0];
    let mut hi = bps[bps.len() - 1];
    for w in bps.windows(2) {
        if mass(w[0]) >= 1.0 && mass(w[1]) <= 1.0 {
            lo = w[0];
            hi = w[1];
            break;
        }
    }
    let (ml, mh) = (mass(lo), mass(hi));
    let tau = if (ml - mh).abs() < 1e-300 { lo } else { lo + (ml - 1.0) * (hi - lo) / (ml - mh) };
    v.iter().map(|x| (x - tau).clamp(0.0, ub)).collect()
}

/// Solution of `min ½ aᵀKa  s.t. Σa = 1, 0 ≤ a ≤ ub` by accelerated projected
/// gradient, iterated until the pairwise KKT gap is below `tol`.
pub fn ocsvm_qp_oracle(k: &[Vec<f64>], ub: f64, tol: f64) -> Vec<f64> {
    let n = k.len();
    let lip: f64 = k.iter().map(|r| r.iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max);
    let step = 1.0 / lip;
    let grad = |a: &[f64]| -> Vec<f64> { k.iter().map(|r| r.iter().zip(a).map(|(x, y)| x * y).sum()).collect() };
    let mut a = project_capped_simplex(&vec![1.0 / n as f64; n], ub);
    let mut y = a.clone();
    let mut t = 1.0f64;
    for it in 0..2_000_000 {
        let g = grad(&y);
        let cand: Vec<f64> = y.iter().zip(&g).map(|(v, gi)| v - step * gi).collect();
        let next = project_capped_simplex(&cand, ub);
        // Gradient-based adaptive restart.
        let restart: f64 = y.iter().zip(next.iter().zip(&a)).map(|(yi, (n1, a0))| (yi - n1) * (n1 - a0)).sum();
        if restart > 0.0 {
            t = 1.0;
            y = next.clone();
        } else {
            let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
            y = next
                .iter()
                .zip(&a)
                .map(|(n1, a0)| n1 + (t - 1.0) / t_next * (n1 - a0))
                .collect();
            t = t_next;
        }
        a = next;
        if it % 50 == 0 && kkt_gap(&a, &grad(&a), ub) <= tol {
            break;
        }
    }
    a
}

/// `max_{a_i > 0} g_i − min_{a_i < ub} g_i`, zero at the optimum.
pub fn kkt_gap(a: &[f64], g: &[f64], ub: f64) -> f64 {
    let eps = 1e-14;
    let low = a
        .iter()
        .zip(g)
        .filter(|(ai, _)| **ai > eps)
        .map(|(_, gi)| *gi)
        .fold(f64::NEG_INFINITY, f64::max);
    let up = a
        .iter()
        .zip(g)
        .filter(|(ai, _)| **ai < ub - eps)
        .map(|(_, gi)| *gi)
        .fold(f64::INFINITY, f64::min);
    (low - up).max(0.0)
}

/// Admissible offsets `[lo, hi]` for a dual solution: free coefficients pin
/// the offset; otherwise it lies between the bounded and the zero gradients.
pub fn rho_interval(a: &[f64], g: &[f64], ub: f64, slack: f64) -> (f64, f64) {
    let free: Vec<f64> = a
        .iter()
        .zip(g)
        .filter(|(ai, _)| **ai > slack && **ai < ub - slack)
        .map(|(_, gi)| *gi)
        .collect();
    if !free.is_empty() {
        let m = free.iter().sum::<f64>() / free.len() as f64;
        return (m, m);
    }
    let lo = a
        .iter()
        .zip(g)
        .filter(|(ai, _)| **ai >= ub - slack)
        .map(|(_, gi)| *gi)
        .fold(f64::NEG_INFINITY, f64::max);
    let hi = a
        .iter()
        .zip(g)
        .filter(|(ai, _)| **ai <= slack)
        .map(|(_, gi)| *gi)
        .fold(f64::INFINITY, f64::min);
    (lo, hi)
}

pub fn rbf_gram(x: &[Vec<f64>], gamma: f64) -> Vec<Vec<f64>> {
    x.iter()
        .map(|a| {
            x.iter()
                .map(|b| (-gamma * a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>()).exp())
                .collect()
        })
        .collect()
}

/// Central finite-difference gradient.
pub fn central_diff(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let mut p = x.to_vec();
            let mut m = x.to_vec();
            p[i] += h;
            m[i] -= h;
            (f(&p) - f(&m)) / (2.0 * h)
        })
        .collect()
}

pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let scale: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

/// Smallest |pre-activation| over the hidden ReLU units at `x`.
pub fn kink_margin(net: &TinyNet, x: &[f64]) -> f64 {
    let mut cur = x.to_vec();
    let mut margin = f64::INFINITY;
    for layer in net.layers() {
        let z: Vec<f64> = (0..layer.d_out)
            .map(|o| {
                layer.weights[o * layer.d_in..(o + 1) * layer.d_in]
                    .iter()
                    .zip(&cur)
                    .map(|(w, v)| w * v)
                    .sum::<f64>()
                    + layer.bias[o]
            })
            .collect();
        if layer.activation == Activation::Relu {
            margin = z.iter().fold(margin, |m, v| m.min(v.abs()));
            cur = z.iter().map(|v| v.max(0.0)).collect();
        } else {
            cur = z;
        }
    }
    margin
}

/// Two-class linear network `logits = W x + b` on a box wide enough to never clip.
pub fn linear_binary_net(w: &Matrix, b: &[f64]) -> TinyNet {
    let d = w.cols();
    let layer = Dense::new(w.clone(), b.to_vec(), Activation::Identity).unwrap();
    TinyNet::new(vec![layer], InputBox::uniform(d, -1e6, 1e6)).unwrap()
}

pub fn random_matrix(r: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    let data = (0..rows * cols).map(|_| r.random_range(-scale..scale)).collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

/// A quick configuration for pipeline tests (seconds, not minutes).
pub fn small_config() -> Config {
    Config::from_json_str(SMALL_CONFIG).unwrap()
}

pub const SMALL_CONFIG: &str = r#"{
  "seed": 7,
  "data": { "n_per_class": 80, "n_classes": 3, "dim": 8, "spread": 0.3, "radius": 2.0 },
  "model": {
    "architecture": { "hidden": [24, 16] },
    "training": { "epochs": 30, "learning_rate": 0.05, "batch_size": 16, "momentum": 0.9 }
  },
  "attacks": [
    { "name": "fgsm", "kind": "fgsm", "epsilon": 0.8 },
    { "name": "bim", "kind": "bim", "epsilon": 0.8, "alpha": 0.1, "k_steps": 10 }
  ],
  "detectors": {
    "ocsvm": { "budget": 5 },
    "maha": { "lambdas": [0.0, 0.001] },
    "lid": { "ks": [10, 20] }
  }
}"#;

/// The shipped desk-scale fixture.
pub fn desk_config() -> Config {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/desk.json");
    Config::load(std::path::Path::new(path), &[]).unwrap()
}
