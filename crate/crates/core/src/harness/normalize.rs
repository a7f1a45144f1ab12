//! Zero-mean, unit-variance pre-alignment.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{RegError, Result};
use crate::pointset::PointSet;
use crate::serde_mat;
use crate::transform::Transform;

/// `p_normalized = (p - mu) / rho`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationParams {
    #[serde(with = "serde_mat::vector")]
    pub mu: DVector<f64>,
    pub rho: f64,
}

impl NormalizationParams {
    pub fn identity(dim: usize) -> Self {
        Self { mu: DVector::zeros(dim), rho: 1.0 }
    }

    pub fn apply(&self, p: &PointSet) -> Result<PointSet> {
        self.check(p)?;
        let mut m = p.matrix().clone();
        for mut row in m.row_iter_mut() {
            row -= self.mu.transpose();
        }
        PointSet::new(m / self.rho)
    }

    pub fn invert(&self, p: &PointSet) -> Result<PointSet> {
        self.check(p)?;
        let mut m = p.matrix() * self.rho;
        for mut row in m.row_iter_mut() {
            row += self.mu.transpose();
        }
        PointSet::new(m)
    }

    /// Normalization equal to applying `self` and then `inner`.
    pub fn then(&self, inner: &NormalizationParams) -> NormalizationParams {
        NormalizationParams { mu: &self.mu + &inner.mu * self.rho, rho: self.rho * inner.rho }
    }

    fn check(&self, p: &PointSet) -> Result<()> {
        if p.dim() != self.mu.len() {
            return Err(RegError::DimensionMismatch { expected: self.mu.len(), got: p.dim() });
        }
        Ok(())
    }
}

/// Overall standard deviation `sqrt(sum |p - mu|^2 / (N D))`.
pub fn spread(p: &PointSet) -> f64 {
    let mu = p.centroid();
    let mut acc = 0.0;
    for row in p.matrix().row_iter() {
        acc += (row.transpose() - &mu).norm_squared();
    }
    (acc / (p.count() * p.dim()) as f64).sqrt()
}

/// Shifts to zero mean and scales to unit overall variance. The flag is set
/// when the set has zero spread, in which case `rho = 1`.
pub fn normalize(p: &PointSet) -> Result<(PointSet, NormalizationParams, bool)> {
    let mu = p.centroid();
    let rho = spread(p);
    let degenerate = !(rho > 0.0);
    let params = NormalizationParams { mu, rho: if degenerate { 1.0 } else { rho } };
    Ok((params.apply(p)?, params, degenerate))
}

/// See [`Transform::denormalize`].
pub fn denormalize_transform(t: &Transform, nx: &NormalizationParams, ny: &NormalizationParams) -> Transform {
    t.denormalize(nx, ny)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_points_in_1d() {
        let p = PointSet::from_rows(&[vec![0.0], vec![2.0]]).unwrap();
        let (q, params, flag) = normalize(&p).unwrap();
        assert!(!flag);
        assert_eq!(params.mu[0], 1.0);
        assert_eq!(params.rho, 1.0);
        assert_eq!(q.rows(), vec![vec![-1.0], vec![1.0]]);
    }

    #[test]
    fn zero_spread() {
        let p = PointSet::from_rows(&[vec![3.0, 1.0], vec![3.0, 1.0]]).unwrap();
        let (q, params, flag) = normalize(&p).unwrap();
        assert!(flag);
        assert_eq!(params.rho, 1.0);
        assert!(q.matrix().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn composition() {
        let a = NormalizationParams { mu: DVector::from_vec(vec![1.0, -2.0]), rho: 3.0 };
        let b = NormalizationParams { mu: DVector::from_vec(vec![0.5, 0.25]), rho: 0.5 };
        let p = PointSet::from_rows(&[vec![4.0, 7.0], vec![-1.0, 0.0]]).unwrap();
        let two_steps = b.apply(&a.apply(&p).unwrap()).unwrap();
        let one_step = a.then(&b).apply(&p).unwrap();
        assert!((two_steps.matrix() - one_step.matrix()).norm() < 1e-14);
    }
}
