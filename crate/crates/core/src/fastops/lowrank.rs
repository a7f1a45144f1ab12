//! Leading eigenpairs of a symmetric operator and the shifted low-rank solve.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{gauss_transform, GaussTransformPlan};
use crate::error::{RegError, Result};
use crate::pointset::PointSet;

/// A symmetric linear operator known through its products with blocks of vectors.
pub trait SymmetricOperator {
    fn size(&self) -> usize;
    fn apply(&self, v: &DMatrix<f64>) -> Result<DMatrix<f64>>;
}

pub struct DenseOperator<'a>(pub &'a DMatrix<f64>);

impl SymmetricOperator for DenseOperator<'_> {
    fn size(&self) -> usize {
        self.0.nrows()
    }

    fn apply(&self, v: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        Ok(self.0 * v)
    }
}

/// The Gaussian kernel matrix of a point set, applied through Gauss transforms
/// so it never has to be stored.
pub struct KernelOperator {
    pub points: PointSet,
    pub beta: f64,
    pub plan: GaussTransformPlan,
}

impl SymmetricOperator for KernelOperator {
    fn size(&self) -> usize {
        self.points.count()
    }

    fn apply(&self, v: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        gauss_transform(&self.points, &self.points, v, self.beta * self.beta, &self.plan)
    }
}

/// `G ~ Q diag(lambda) Q^T` from the leading eigenpairs.
#[derive(Debug, Clone)]
pub struct LowRankKernel {
    pub q: DMatrix<f64>,
    pub lambda: DVector<f64>,
}

impl LowRankKernel {
    pub fn rank(&self) -> usize {
        self.lambda.len()
    }

    /// `Q diag(lambda) Q^T v`.
    pub fn apply(&self, v: &DMatrix<f64>) -> DMatrix<f64> {
        let mut c = self.q.transpose() * v;
        for (i, l) in self.lambda.iter().enumerate() {
            c.row_mut(i).scale_mut(*l);
        }
        &self.q * c
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        self.apply(&DMatrix::identity(self.q.nrows(), self.q.nrows()))
    }
}

const BLOCK: usize = 32;

fn random_block(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

/// Orthonormal basis of the columns of `v` after projecting out `locked`.
fn orthonormalize(mut v: DMatrix<f64>, locked: &DMatrix<f64>) -> DMatrix<f64> {
    if locked.ncols() > 0 {
        for _ in 0..2 {
            let c = locked.transpose() * &v;
            v -= locked * c;
        }
    }
    v.qr().q()
}

/// Largest eigenvalues of `op` and their eigenvectors.
///
/// Blocks of eigenpairs are found by subspace iteration with Rayleigh-Ritz
/// extraction; converged pairs are removed from the operator (Hotelling
/// deflation) before the next block. A pair is converged when
/// `|G q - lambda q| <= tol * lambda_1`. Each block is allowed `10 * M` iterations.
pub fn topk_eigs<O: SymmetricOperator + ?Sized>(op: &O, k: usize, tol: f64, seed: u64) -> Result<LowRankKernel> {
    let m = op.size();
    if k == 0 || k > m {
        return Err(RegError::InvalidParameter(format!("rank must lie in 1..={m}, got {k}")));
    }
    if !(tol > 0.0) {
        return Err(RegError::InvalidParameter("eigen tolerance must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut q = DMatrix::<f64>::zeros(m, 0);
    let mut lam: Vec<f64> = Vec::with_capacity(k);
    let mut scale: Option<f64> = None;
    let cap = 10 * m;

    while lam.len() < k {
        let want = (k - lam.len()).min(BLOCK);
        let room = m - lam.len();
        let bs = (want + (want / 2).max(8)).min(room);
        let mut v = orthonormalize(random_block(m, bs, &mut rng), &q);
        let mut iter = 0;
        loop {
            let mut av = op.apply(&v)?;
            if q.ncols() > 0 {
                let mut c = q.transpose() * &v;
                for (i, l) in lam.iter().enumerate() {
                    c.row_mut(i).scale_mut(*l);
                }
                av -= &q * c;
            }
            let mut h = v.transpose() * &av;
            h = (&h + h.transpose()) * 0.5;
            let eig = h.symmetric_eigen();
            let mut order: Vec<usize> = (0..bs).collect();
            order.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap());
            let s = DMatrix::from_fn(bs, bs, |i, j| eig.eigenvectors[(i, order[j])]);
            let theta: Vec<f64> = order.iter().map(|&j| eig.eigenvalues[j]).collect();
            let u = &v * &s;
            let au = &av * &s;
            let lam1 = *scale.get_or_insert(theta[0].abs().max(f64::MIN_POSITIVE));
            let converged = (0..want)
                .take_while(|&i| (au.column(i) - u.column(i) * theta[i]).norm() <= tol * lam1)
                .count();
            if converged == want {
                let mut nq = DMatrix::zeros(m, q.ncols() + want);
                nq.columns_mut(0, q.ncols()).copy_from(&q);
                nq.columns_mut(q.ncols(), want).copy_from(&u.columns(0, want));
                q = nq;
                lam.extend_from_slice(&theta[..want]);
                break;
            }
            iter += 1;
            if iter >= cap {
                return Err(RegError::EigenNonConvergence { converged: lam.len() + converged, requested: k });
            }
            v = orthonormalize(au, &q);
        }
    }

    // Deflation keeps blocks in descending order up to ties; sort to be sure.
    let mut idx: Vec<usize> = (0..k).collect();
    idx.sort_by(|&a, &b| lam[b].partial_cmp(&lam[a]).unwrap());
    let q = DMatrix::from_fn(m, k, |i, j| q[(i, idx[j])]);
    // Rounding can leave eigenvalues of a semidefinite kernel slightly negative.
    let lambda = DVector::from_iterator(k, idx.iter().map(|&i| lam[i].max(0.0)));
    Ok(LowRankKernel { q, lambda })
}

/// Leading eigenvalues of `op`, computed block by block until one drops below
/// `ratio * lambda_1` or `max_rank` values are known.
pub fn kernel_spectrum<O: SymmetricOperator + ?Sized>(op: &O, ratio: f64, max_rank: usize, seed: u64) -> Result<Vec<f64>> {
    let m = op.size();
    let max_rank = max_rank.min(m);
    let mut k = BLOCK.min(max_rank);
    loop {
        let lr = topk_eigs(op, k, 1e-9, seed)?;
        let vals: Vec<f64> = lr.lambda.iter().copied().collect();
        let crossed = vals.iter().any(|&l| l < ratio * vals[0]);
        if crossed || k == max_rank {
            return Ok(vals);
        }
        k = (2 * k).min(max_rank);
    }
}

/// Solves `(d(p1) Q Lambda Q^T + a I) W = rhs` with `a = lam_sigma2` through the
/// Woodbury identity, where `rhs = P X - d(P 1) Y` is the scaled right-hand side.
///
/// Rows with `p1 = 0` get `W = rhs / a`; otherwise this is the regularized
/// coefficient system with the kernel replaced by its low-rank approximation.
pub fn woodbury_solve(lr: &LowRankKernel, p1: &[f64], lam_sigma2: f64, rhs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let m = lr.q.nrows();
    if p1.len() != m || rhs.nrows() != m {
        return Err(RegError::CountMismatch { expected: m, got: p1.len().min(rhs.nrows()) });
    }
    if !(lam_sigma2 > 0.0) || !lam_sigma2.is_finite() {
        return Err(RegError::InvalidParameter(format!("lambda * sigma2 must be positive, got {lam_sigma2}")));
    }
    if p1.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
        return Err(RegError::InvalidParameter("p1 entries must be finite and non-negative".into()));
    }
    let a = lam_sigma2;
    let k = lr.rank();
    let sqrt_l: Vec<f64> = lr.lambda.iter().map(|l| l.max(0.0).sqrt()).collect();
    // Q_s = Q diag(sqrt(lambda)); inner = I + Q_s^T d(p1) Q_s / a
    let mut qs = lr.q.clone();
    for j in 0..k {
        qs.column_mut(j).scale_mut(sqrt_l[j]);
    }
    let mut dqs = qs.clone();
    for i in 0..m {
        dqs.row_mut(i).scale_mut(p1[i]);
    }
    let mut inner = qs.transpose() * &dqs / a;
    for i in 0..k {
        inner[(i, i)] += 1.0;
    }
    let inner = (&inner + inner.transpose()) * 0.5;
    let diag_max = inner.diagonal().max();
    let chol = inner.cholesky().ok_or(RegError::SingularInner { condition: f64::INFINITY })?;
    let l_diag = chol.l_dirty().diagonal();
    let condition = (l_diag.max() / l_diag.min()).powi(2).max(diag_max);
    let z = chol.solve(&(qs.transpose() * rhs));
    let w = rhs / a - dqs * z / (a * a);
    if w.iter().any(|v| !v.is_finite()) {
        return Err(RegError::SingularInner { condition });
    }
    Ok(w)
}
