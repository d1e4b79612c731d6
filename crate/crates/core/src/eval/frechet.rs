use nalgebra::{DMatrix, DVector, SymmetricEigen};
use crate::error::{invalid, Result};

/// Gaussian fit of a feature cloud.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStats {
    pub mean: DVector<f64>,
    /// Unbiased (n − 1) covariance.
    pub cov: DMatrix<f64>,
    pub n: usize,
}

impl FeatureStats {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>, n: usize) -> Result<Self> {
        let d = mean.len();
        if cov.nrows() != d || cov.ncols() != d {
            return Err(invalid("covariance shape does not match the mean"));
        }
        if n < 2 {
            return Err(invalid("feature statistics need at least two samples"));
        }
        if mean.iter().chain(cov.iter()).any(|v| !v.is_finite()) {
            return Err(invalid("feature statistics must be finite"));
        }
        if (&cov - cov.transpose()).amax() > 1e-9 * cov.amax().max(1.0) {
            return Err(invalid("covariance is not symmetric"));
        }
        Ok(Self { mean, cov, n })
    }

    pub fn from_features(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        if n < 2 {
            return Err(invalid("feature statistics need at least two samples"));
        }
        let d = rows[0].len();
        if rows.iter().any(|r| r.len() != d) {
            return Err(invalid("feature rows differ in length"));
        }
        let x = DMatrix::from_fn(n, d, |i, j| rows[i][j]);
        let mean = DVector::from_fn(d, |j, _| x.column(j).mean());
        let centered = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mean[j]);
        let cov = centered.tr_mul(&centered) / (n as f64 - 1.0);
        let cov = (&cov + cov.transpose()) * 0.5;
        Self::new(mean, cov, n)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

fn psd_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = SymmetricEigen::new(m.clone());
    let mut vals = eig.eigenvalues.clone();
    for v in vals.iter_mut() {
        if *v < -1e-8 {
            return Err(invalid(format!("matrix has a negative eigenvalue {v:.3e}")));
        }
        *v = v.max(0.0).sqrt();
    }
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose())
}

/// `‖μa−μb‖² + Tr(Σa + Σb − 2(ΣaΣb)^{1/2})`, with the trace of the cross
/// term computed as `Tr((Σa^{1/2} Σb Σa^{1/2})^{1/2})`.
pub fn frechet_distance(a: &FeatureStats, b: &FeatureStats) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(invalid(format!("feature dimensions differ: {} vs {}", a.dim(), b.dim())));
    }
    if a.n < 2 || b.n < 2 {
        return Err(invalid("feature statistics need at least two samples"));
    }
    let diff = &a.mean - &b.mean;
    let sa = psd_sqrt(&a.cov)?;
    let inner = &sa * &b.cov * &sa;
    let inner = (&inner + inner.transpose()) * 0.5;
    let cross = psd_sqrt(&inner)?.trace();
    let d = diff.dot(&diff) + a.cov.trace() + b.cov.trace() - 2.0 * cross;
    if !d.is_finite() {
        return Err(invalid("non-finite Fréchet distance"));
    }
    Ok(d.max(0.0))
}
