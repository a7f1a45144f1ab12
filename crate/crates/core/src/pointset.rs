//! Point set container.
//!
//! Points are stored as rows of an `N x D` matrix. Every constructor checks
//! that all coordinates are finite, so downstream numerical code can rely on
//! that without re-validating.

use nalgebra::{DMatrix, DVector, RowDVector};
use serde::{Deserialize, Serialize};

use crate::error::{RegError, Result};

/// An ordered list of `D`-dimensional points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointSet {
    #[serde(with = "crate::serde_mat::matrix")]
    points: DMatrix<f64>,
}

impl PointSet {
    pub fn new(points: DMatrix<f64>) -> Result<Self> {
        if points.nrows() == 0 {
            return Err(RegError::NoPoints);
        }
        if points.ncols() == 0 {
            return Err(RegError::InvalidParameter("dimension must be at least 1".into()));
        }
        for i in 0..points.nrows() {
            if points.row(i).iter().any(|v| !v.is_finite()) {
                return Err(RegError::NonFinite { index: i });
            }
        }
        Ok(Self { points })
    }

    /// Builds a point set from a slice of rows. All rows must share one length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let first = rows.first().ok_or(RegError::NoPoints)?;
        let dim = first.len();
        for r in rows {
            if r.len() != dim {
                return Err(RegError::DimensionMismatch { expected: dim, got: r.len() });
            }
        }
        let m = DMatrix::from_fn(rows.len(), dim, |i, j| rows[i][j]);
        Self::new(m)
    }

    /// Row-major flat buffer constructor.
    pub fn from_row_slice(count: usize, dim: usize, data: &[f64]) -> Result<Self> {
        if data.len() != count * dim {
            return Err(RegError::InvalidParameter(format!(
                "buffer of length {} cannot hold {count} points of dimension {dim}",
                data.len()
            )));
        }
        Self::new(DMatrix::from_row_slice(count, dim, data))
    }

    pub fn count(&self) -> usize {
        self.points.nrows()
    }

    pub fn dim(&self) -> usize {
        self.points.ncols()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.points
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.points
    }

    pub fn point(&self, i: usize) -> DVector<f64> {
        self.points.row(i).transpose()
    }

    pub fn row(&self, i: usize) -> RowDVector<f64> {
        self.points.row(i).into_owned()
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        (0..self.count())
            .map(|i| self.points.row(i).iter().copied().collect())
            .collect()
    }

    /// Row-major copy of the coordinates, convenient for tight loops.
    pub fn to_row_major(&self) -> Vec<f64> {
        let (n, d) = self.points.shape();
        let mut out = Vec::with_capacity(n * d);
        for i in 0..n {
            for j in 0..d {
                out.push(self.points[(i, j)]);
            }
        }
        out
    }

    pub fn check_dim(&self, other: &PointSet) -> Result<()> {
        if self.dim() != other.dim() {
            return Err(RegError::DimensionMismatch { expected: self.dim(), got: other.dim() });
        }
        Ok(())
    }

    /// Subset of points by index, in the given order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            return Err(RegError::NoPoints);
        }
        let d = self.dim();
        Self::new(DMatrix::from_fn(indices.len(), d, |i, j| self.points[(indices[i], j)]))
    }

    /// Appends the rows of `other` below the rows of `self`.
    pub fn concat(&self, other: &PointSet) -> Result<Self> {
        self.check_dim(other)?;
        let (n1, n2, d) = (self.count(), other.count(), self.dim());
        let m = DMatrix::from_fn(n1 + n2, d, |i, j| {
            if i < n1 {
                self.points[(i, j)]
            } else {
                other.points[(i - n1, j)]
            }
        });
        Self::new(m)
    }

    pub fn centroid(&self) -> DVector<f64> {
        let n = self.count() as f64;
        self.points.row_sum().transpose() / n
    }
}

/// Squared Euclidean distance between row `i` of `a` and row `j` of `b`.
pub(crate) fn row_dist2(a: &DMatrix<f64>, i: usize, b: &DMatrix<f64>, j: usize) -> f64 {
    let mut acc = 0.0;
    for k in 0..a.ncols() {
        let d = a[(i, k)] - b[(j, k)];
        acc += d * d;
    }
    acc
}
