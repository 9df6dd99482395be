//! Labelled score matrices, detector identities, and the detector combinations
//! that get their own logistic model.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// The three layer-wise detectors, in canonical column order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Detector {
    /// One-class SVM on whitened activations.
    O,
    /// Mahalanobis distance.
    M,
    /// Local intrinsic dimensionality.
    L,
}

impl Detector {
    pub const ALL: [Detector; 3] = [Detector::O, Detector::M, Detector::L];

    pub fn prefix(self) -> &'static str {
        match self {
            Detector::O => "O",
            Detector::M => "M",
            Detector::L => "L",
        }
    }

    /// `+1` if higher raw scores are more adversarial, `−1` otherwise.
    pub fn orientation(self) -> f64 {
        match self {
            Detector::O | Detector::M => -1.0,
            Detector::L => 1.0,
        }
    }
}

/// A subset of detectors whose scores are concatenated into one logistic model.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Combination(pub Vec<Detector>);

impl Combination {
    /// O, M, L, O+M, O+L, M+L, EnAD.
    pub fn all() -> Vec<Combination> {
        use Detector::*;
        [vec![O], vec![M], vec![L], vec![O, M], vec![O, L], vec![M, L], vec![O, M, L]]
            .into_iter()
            .map(Combination)
            .collect()
    }

    pub fn name(&self) -> String {
        if self.0.len() == Detector::ALL.len() {
            return "EnAD".into();
        }
        self.0.iter().map(|d| d.prefix()).collect::<Vec<_>>().join("+")
    }

    pub fn detectors(&self) -> &[Detector] {
        &self.0
    }

    pub fn is_standalone(&self) -> bool {
        self.0.len() == 1
    }
}

/// Score features with adversarial labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledScoreSet {
    features: Matrix,
    labels: Vec<bool>,
    feature_names: Vec<String>,
}

impl LabeledScoreSet {
    pub fn new(features: Matrix, labels: Vec<bool>, feature_names: Vec<String>) -> Result<Self> {
        if labels.len() != features.rows() {
            return Err(Error::param(format!(
                "{} labels for {} score rows",
                labels.len(),
                features.rows()
            )));
        }
        if feature_names.len() != features.cols() {
            return Err(Error::param(format!(
                "{} names for {} score columns",
                feature_names.len(),
                features.cols()
            )));
        }
        if !features.is_finite() {
            return Err(Error::param("score features must be finite"));
        }
        let mut seen = HashSet::new();
        if let Some(dup) = feature_names.iter().find(|n| !seen.insert(n.as_str())) {
            return Err(Error::param(format!("duplicate feature name {dup}")));
        }
        Ok(Self {
            features,
            labels,
            feature_names,
        })
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> &[bool] {
        &self.labels
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> Result<Self> {
        Self::new(
            self.features.select_rows(idx),
            idx.iter().map(|&i| self.labels[i]).collect(),
            self.feature_names.clone(),
        )
    }
}

/// Concatenate per-detector score matrices column-wise, naming columns
/// `"<prefix>.l<k>"` in part order then layer order.
pub fn concat_scores(parts: &[(&str, &Matrix)]) -> Result<(Matrix, Vec<String>)> {
    let Some((_, first)) = parts.first() else {
        return Err(Error::param("no score matrices to concatenate"));
    };
    let n = first.rows();
    if let Some((name, m)) = parts.iter().find(|(_, m)| m.rows() != n) {
        return Err(Error::param(format!(
            "part {name} has {} rows, expected {n}",
            m.rows()
        )));
    }
    let width: usize = parts.iter().map(|(_, m)| m.cols()).sum();
    let mut out = Matrix::zeros(n, width);
    let mut names = Vec::with_capacity(width);
    let mut offset = 0;
    for (name, m) in parts {
        for j in 0..m.cols() {
            names.push(format!("{name}.l{}", j + 1));
            for i in 0..n {
                out[(i, offset + j)] = m[(i, j)];
            }
        }
        offset += m.cols();
    }
    Ok((out, names))
}

/// One detector's score matrix under a column prefix.
pub struct DetectorScoresPart {
    prefix: &'static str,
    scores: Matrix,
}

impl DetectorScoresPart {
    pub fn new(prefix: &'static str, scores: Matrix) -> Self {
        Self { prefix, scores }
    }

    pub fn labeled(&self, labels: &[bool]) -> Result<LabeledScoreSet> {
        let (features, names) = concat_scores(&[(self.prefix, &self.scores)])?;
        LabeledScoreSet::new(features, labels.to_vec(), names)
    }
}

/// Score matrices of the three detectors over the same rows.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectorScores {
    pub o: Matrix,
    pub m: Matrix,
    pub l: Matrix,
}

impl DetectorScores {
    pub fn get(&self, d: Detector) -> &Matrix {
        match d {
            Detector::O => &self.o,
            Detector::M => &self.m,
            Detector::L => &self.l,
        }
    }

    pub fn n_rows(&self) -> usize {
        self.o.rows()
    }

    pub fn select_rows(&self, idx: &[usize]) -> Self {
        Self {
            o: self.o.select_rows(idx),
            m: self.m.select_rows(idx),
            l: self.l.select_rows(idx),
        }
    }

    /// Labelled feature set for one combination.
    pub fn labeled(&self, combo: &Combination, labels: &[bool]) -> Result<LabeledScoreSet> {
        let parts: Vec<(&str, &Matrix)> = combo
            .detectors()
            .iter()
            .map(|&d| (d.prefix(), self.get(d)))
            .collect();
        let (features, names) = concat_scores(&parts)?;
        LabeledScoreSet::new(features, labels.to_vec(), names)
    }
}
