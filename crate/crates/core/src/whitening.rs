//! Class-conditional centering followed by PCA-whitening of layer activations.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{symmetric_eigen, Matrix};

/// Directions with eigenvalue `<= EIGEN_FLOOR * λ_max` are discarded.
pub const EIGEN_FLOOR: f64 = 1e-10;

/// Per-class means and the covariance pooled over class-centred rows.
#[derive(Clone, Debug)]
pub struct ClassStatistics {
    pub means: Matrix,
    pub covariance: Matrix,
    pub counts: Vec<usize>,
}

/// Class means plus the tied (pooled) covariance `Σ = 1/n Σ_i (h_i − μ_{y_i})(h_i − μ_{y_i})ᵀ`.
pub fn class_statistics(features: &Matrix, labels: &[usize], n_classes: usize) -> Result<ClassStatistics> {
    let (n, d) = (features.rows(), features.cols());
    if labels.len() != n {
        return Err(Error::param("one label per feature row is required"));
    }
    if n < 2 {
        return Err(Error::param("at least two rows are needed to estimate a covariance"));
    }
    let mut means = Matrix::zeros(n_classes, d);
    let mut counts = vec![0usize; n_classes];
    for (row, &y) in features.iter_rows().zip(labels) {
        if y >= n_classes {
            return Err(Error::param(format!("label {y} out of range")));
        }
        counts[y] += 1;
        for (m, v) in means.row_mut(y).iter_mut().zip(row) {
            *m += v;
        }
    }
    if let Some(c) = counts.iter().position(|&k| k == 0) {
        return Err(Error::Fit(format!("class {c} has no training rows")));
    }
    for (c, &k) in counts.iter().enumerate() {
        means.row_mut(c).iter_mut().for_each(|m| *m /= k as f64);
    }
    let mut cov = Matrix::zeros(d, d);
    let mut centred = vec![0.0; d];
    for (row, &y) in features.iter_rows().zip(labels) {
        for ((z, v), m) in centred.iter_mut().zip(row).zip(means.row(y)) {
            *z = v - m;
        }
        for a in 0..d {
            let za = centred[a];
            if za == 0.0 {
                continue;
            }
            let dst = cov.row_mut(a);
            for b in a..d {
                dst[b] += za * centred[b];
            }
        }
    }
    for a in 0..d {
        for b in a..d {
            let v = cov[(a, b)] / n as f64;
            cov[(a, b)] = v;
            cov[(b, a)] = v;
        }
    }
    Ok(ClassStatistics {
        means,
        covariance: cov,
        counts,
    })
}

/// Eigen-decomposition with the floor applied: `(λ_1..λ_r, U (d×r))`.
pub(crate) fn floored_eigen(cov: &Matrix) -> Result<(Vec<f64>, Matrix)> {
    let (vals, vecs) = symmetric_eigen(cov)?;
    let max = vals.first().copied().unwrap_or(0.0);
    if !(max > 0.0) {
        return Err(Error::Fit("covariance has rank 0 (constant features)".into()));
    }
    let r = vals.iter().take_while(|&&v| v > EIGEN_FLOOR * max).count();
    let d = cov.rows();
    let mut u = Matrix::zeros(d, r);
    for i in 0..d {
        for j in 0..r {
            u[(i, j)] = vecs[(i, j)];
        }
    }
    Ok((vals[..r].to_vec(), u))
}

/// Fitted `W^PCA = Λ^{-1/2} Uᵀ` plus the class means used for centering.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerWhitener {
    pub class_means: Matrix,
    /// Retained eigenvectors as columns, `d × r`.
    pub eigvecs: Matrix,
    /// Retained eigenvalues, descending.
    pub eigvals: Vec<f64>,
    pub floor: f64,
}

impl LayerWhitener {
    pub fn fit(features: &Matrix, labels: &[usize], n_classes: usize) -> Result<Self> {
        let stats = class_statistics(features, labels, n_classes)?;
        let (eigvals, eigvecs) = floored_eigen(&stats.covariance)?;
        Ok(Self {
            class_means: stats.means,
            eigvecs,
            eigvals,
            floor: EIGEN_FLOOR,
        })
    }

    pub fn dim(&self) -> usize {
        self.eigvecs.rows()
    }

    /// Number of retained directions.
    pub fn rank(&self) -> usize {
        self.eigvals.len()
    }

    pub fn n_classes(&self) -> usize {
        self.class_means.rows()
    }

    /// `Λ^{-1/2} Uᵀ (h − μ_c)`.
    pub fn whiten(&self, h: &[f64], class: usize) -> Result<Vec<f64>> {
        if h.len() != self.dim() {
            return Err(Error::param(format!(
                "activation has length {}, whitener expects {}",
                h.len(),
                self.dim()
            )));
        }
        if class >= self.n_classes() {
            return Err(Error::param(format!("class {class} out of range")));
        }
        let centred: Vec<f64> = h
            .iter()
            .zip(self.class_means.row(class))
            .map(|(a, m)| a - m)
            .collect();
        let proj = self.eigvecs.tmatvec(&centred);
        Ok(proj
            .into_iter()
            .zip(&self.eigvals)
            .map(|(p, l)| p / l.sqrt())
            .collect())
    }

    /// Whiten every row of `features`, centering row `i` on `classes[i]`.
    pub fn whiten_rows(&self, features: &Matrix, classes: &[usize]) -> Result<Matrix> {
        let rows = features
            .iter_rows()
            .zip(classes)
            .map(|(h, &c)| self.whiten(h, c))
            .collect::<Result<Vec<_>>>()?;
        if rows.is_empty() {
            return Ok(Matrix::zeros(0, self.rank()));
        }
        Matrix::from_rows(&rows)
    }
}

/// Convenience wrapper for [`LayerWhitener::fit`].
pub fn fit_whitener(features: &Matrix, labels: &[usize], n_classes: usize) -> Result<LayerWhitener> {
    LayerWhitener::fit(features, labels, n_classes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diagonal_covariance_whitening() {
        // Points (±2, 0), (0, ±1): covariance diag(2, 0.5) about the origin mean.
        let x = Matrix::from_rows(&[[2.0, 0.0], [-2.0, 0.0], [0.0, 1.0], [0.0, -1.0]]).unwrap();
        let w = fit_whitener(&x, &[0; 4], 1).unwrap();
        assert!((w.eigvals[0] - 2.0).abs() < 1e-12);
        assert!((w.eigvals[1] - 0.5).abs() < 1e-12);
        let z = w.whiten(&[2.0, 0.0], 0).unwrap();
        assert!((z[0].abs() - 2.0 / 2f64.sqrt()).abs() < 1e-12);
        assert!(z[1].abs() < 1e-12);
    }

    #[test]
    fn diag_4_1_scales_by_2_and_1() {
        // Four points with covariance diag(4, 1) exactly.
        let x = Matrix::from_rows(&[[2.0, 1.0], [-2.0, -1.0], [2.0, -1.0], [-2.0, 1.0]]).unwrap();
        let w = fit_whitener(&x, &[0; 4], 1).unwrap();
        assert!((w.eigvals[0] - 4.0).abs() < 1e-12 && (w.eigvals[1] - 1.0).abs() < 1e-12);
        let z = w.whiten(&[3.0, 5.0], 0).unwrap();
        assert!((z[0].abs() - 1.5).abs() < 1e-12);
        assert!((z[1].abs() - 5.0).abs() < 1e-12);
    }

    #[test]
    fn centre_maps_to_origin_and_duplicate_column_is_floored() {
        let x = Matrix::from_rows(&[[1.0, 1.0, 0.0], [2.0, 2.0, 1.0], [0.0, 0.0, 3.0], [5.0, 5.0, 1.0]])
            .unwrap();
        let w = fit_whitener(&x, &[0, 0, 1, 1], 2).unwrap();
        assert_eq!(w.rank(), 2);
        let mu = w.class_means.row(1).to_vec();
        assert!(w.whiten(&mu, 1).unwrap().iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn errors() {
        let x = Matrix::from_rows(&[[1.0, 1.0], [1.0, 1.0]]).unwrap();
        assert!(matches!(fit_whitener(&x, &[0, 0], 1), Err(Error::Fit(_))));
        let x = Matrix::from_rows(&[[1.0, 2.0], [3.0, 1.0]]).unwrap();
        assert!(matches!(fit_whitener(&x, &[0, 0], 2), Err(Error::Fit(_))));
        let w = fit_whitener(&x, &[0, 0], 1).unwrap();
        assert!(w.whiten(&[1.0], 0).is_err());
    }
}
