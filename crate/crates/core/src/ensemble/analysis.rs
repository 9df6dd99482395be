//! Post-hoc analyses: per-layer AUROC and pairwise detector contingency.

use serde::{Deserialize, Serialize};

use super::metrics::auroc;
use super::scores::Detector;
use crate::error::{Error, Result};
use crate::linalg::Matrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerAuroc {
    pub detector: Detector,
    /// 1-based layer index.
    pub layer: usize,
    pub auroc: f64,
    /// Highest AUROC among this detector's layers (first wins on ties).
    pub best: bool,
}

/// AUROC of every layer-specific score, oriented so that higher means more adversarial.
pub fn per_layer_auroc(parts: &[(Detector, &Matrix)], labels: &[bool]) -> Result<Vec<LayerAuroc>> {
    let mut out = Vec::new();
    for &(det, m) in parts {
        if m.rows() != labels.len() {
            return Err(Error::param(format!(
                "{} score rows for {} labels",
                m.rows(),
                labels.len()
            )));
        }
        let start = out.len();
        for j in 0..m.cols() {
            let col: Vec<f64> = m.column(j).into_iter().map(|v| det.orientation() * v).collect();
            out.push(LayerAuroc {
                detector: det,
                layer: j + 1,
                auroc: auroc(&col, labels)?,
                best: false,
            });
        }
        if let Some(best) = (start..out.len()).reduce(|b, i| if out[i].auroc > out[b].auroc { i } else { b }) {
            out[best].best = true;
        }
    }
    Ok(out)
}

/// Adversarial rows split by which of two detectors caught them.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Contingency {
    pub both: usize,
    pub only_a: usize,
    pub only_b: usize,
    pub neither: usize,
}

impl Contingency {
    pub fn total(&self) -> usize {
        self.both + self.only_a + self.only_b + self.neither
    }
}

pub fn contingency(pred_a: &[bool], pred_b: &[bool], adv: &[bool]) -> Result<Contingency> {
    if pred_a.len() != adv.len() || pred_b.len() != adv.len() {
        return Err(Error::param(format!(
            "prediction lengths {} and {} for {} rows",
            pred_a.len(),
            pred_b.len(),
            adv.len()
        )));
    }
    let mut c = Contingency::default();
    for ((&a, &b), _) in pred_a.iter().zip(pred_b).zip(adv).filter(|(_, &m)| m) {
        match (a, b) {
            (true, true) => c.both += 1,
            (true, false) => c.only_a += 1,
            (false, true) => c.only_b += 1,
            (false, false) => c.neither += 1,
        }
    }
    Ok(c)
}
