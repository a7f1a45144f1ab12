//! Non-rigid registration with a Gaussian-kernel displacement field.
//!
//! The model moves as `T(Y) = Y + G W`, where `G` is the Gaussian affinity
//! matrix of the model points and `W` the coefficients. The M-step solves the
//! regularized least-squares system for `W` and then updates sigma^2.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::config::RegistrationConfig;
use crate::em::{self, MStepModel, MStepOutcome};
use crate::error::{RegError, Result};
use crate::estep::{Neumaier, PosteriorStats, SIGMA2_FLOOR};
use crate::fastops::{topk_eigs, woodbury_solve, DenseOperator, GaussMode, GaussTransformPlan, KernelOperator, LowRankKernel, SymmetricOperator};
use crate::harness::normalize::NormalizationParams;
use crate::pointset::{row_dist2, PointSet};
use crate::report::{Method, RegistrationReport, Warning};
use crate::rigid::q_value;
use crate::serde_mat;
use crate::transform::{NonRigidMap, Transform};

/// `g_ij = exp(-|y_i - y_j|^2 / 2 beta^2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelMatrix {
    pub g: DMatrix<f64>,
    pub beta: f64,
}

impl SymmetricOperator for KernelMatrix {
    fn size(&self) -> usize {
        self.g.nrows()
    }

    fn apply(&self, v: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        Ok(&self.g * v)
    }
}

fn check_beta(beta: f64) -> Result<()> {
    if !(beta > 0.0) || !beta.is_finite() {
        return Err(RegError::InvalidParameter(format!("beta must be positive, got {beta}")));
    }
    Ok(())
}

pub fn build_kernel(y: &PointSet, beta: f64) -> Result<KernelMatrix> {
    check_beta(beta)?;
    let m = y.count();
    let ym = y.matrix();
    let inv = 0.5 / (beta * beta);
    let mut g = DMatrix::from_element(m, m, 1.0);
    for i in 0..m {
        for j in 0..i {
            let v = (-row_dist2(ym, i, ym, j) * inv).exp();
            g[(i, j)] = v;
            g[(j, i)] = v;
        }
    }
    Ok(KernelMatrix { g, beta })
}

/// Displacement field `v(z) = sum_m w_m exp(-|z - y_m|^2 / 2 beta^2)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NonRigidField {
    #[serde(with = "serde_mat::matrix")]
    pub y_ref: DMatrix<f64>,
    #[serde(with = "serde_mat::matrix")]
    pub w_coef: DMatrix<f64>,
    pub beta: f64,
}

impl NonRigidField {
    pub fn new(y_ref: &PointSet, w_coef: DMatrix<f64>, beta: f64) -> Result<Self> {
        check_beta(beta)?;
        if w_coef.shape() != y_ref.matrix().shape() {
            return Err(RegError::CountMismatch { expected: y_ref.count(), got: w_coef.nrows() });
        }
        if w_coef.iter().any(|v| !v.is_finite()) {
            return Err(RegError::InvalidParameter("field coefficients must be finite".into()));
        }
        Ok(Self { y_ref: y_ref.matrix().clone(), w_coef, beta })
    }

    pub fn dim(&self) -> usize {
        self.y_ref.ncols()
    }

    pub fn displacement(&self, z: &PointSet) -> Result<DMatrix<f64>> {
        if z.dim() != self.dim() {
            return Err(RegError::DimensionMismatch { expected: self.dim(), got: z.dim() });
        }
        let zm = z.matrix();
        let inv = 0.5 / (self.beta * self.beta);
        let mut k = DMatrix::zeros(z.count(), self.y_ref.nrows());
        for i in 0..z.count() {
            for j in 0..self.y_ref.nrows() {
                k[(i, j)] = (-row_dist2(zm, i, &self.y_ref, j) * inv).exp();
            }
        }
        Ok(k * &self.w_coef)
    }

    /// `z + v(z)`.
    pub fn transform_points(&self, z: &PointSet) -> Result<PointSet> {
        let v = self.displacement(z)?;
        PointSet::new(z.matrix() + v)
    }
}

/// Solves `(d(p1) G + a I) W = rhs` for a dense symmetric `G`.
///
/// Rows with `p1 = 0` decouple (`w_m = rhs_m / a`); the rest are solved in
/// the symmetric form `(S G S + a I) Z = S^-1 r`, `W = S Z`, `S = d(sqrt(p1))`.
pub fn solve_canonical(g: &DMatrix<f64>, p1: &[f64], a: f64, rhs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let m = g.nrows();
    let d = rhs.ncols();
    let mut w = DMatrix::zeros(m, d);
    let (active, idle): (Vec<usize>, Vec<usize>) = (0..m).partition(|&i| p1[i] > 0.0);
    for &i in &idle {
        for k in 0..d {
            w[(i, k)] = rhs[(i, k)] / a;
        }
    }
    if active.is_empty() {
        return Ok(w);
    }
    let na = active.len();
    let s: Vec<f64> = active.iter().map(|&i| p1[i].sqrt()).collect();
    let mut lhs = DMatrix::zeros(na, na);
    for (r, &i) in active.iter().enumerate() {
        for (c, &j) in active.iter().enumerate() {
            lhs[(r, c)] = s[r] * g[(i, j)] * s[c];
        }
        lhs[(r, r)] += a;
    }
    let mut b = DMatrix::zeros(na, d);
    for (r, &i) in active.iter().enumerate() {
        for k in 0..d {
            let mut v = rhs[(i, k)];
            for &j in &idle {
                v -= p1[i] * g[(i, j)] * w[(j, k)];
            }
            b[(r, k)] = v / s[r];
        }
    }
    let chol = lhs.clone().cholesky().ok_or_else(|| RegError::NonFiniteSolve { condition: condition_estimate(&lhs) })?;
    let z = chol.solve(&b);
    for (r, &i) in active.iter().enumerate() {
        for k in 0..d {
            w[(i, k)] = s[r] * z[(r, k)];
        }
    }
    if w.iter().any(|v| !v.is_finite()) {
        return Err(RegError::NonFiniteSolve { condition: condition_estimate(&lhs) });
    }
    Ok(w)
}

fn condition_estimate(a: &DMatrix<f64>) -> f64 {
    let sv = a.singular_values();
    let (hi, lo) = (sv.max(), sv.min());
    if lo > 0.0 {
        hi / lo
    } else {
        f64::INFINITY
    }
}

fn scaled_rhs(stats: &PosteriorStats, y: &DMatrix<f64>) -> DMatrix<f64> {
    let mut c = stats.px.clone();
    for i in 0..c.nrows() {
        for k in 0..c.ncols() {
            c[(i, k)] -= stats.p1[i] * y[(i, k)];
        }
    }
    c
}

fn check_stats(stats: &PosteriorStats, x: &PointSet, y: &PointSet) -> Result<()> {
    x.check_dim(y)?;
    if stats.p1.len() != y.count() || stats.pt1.len() != x.count() || stats.px.shape() != y.matrix().shape() {
        return Err(RegError::CountMismatch { expected: y.count(), got: stats.p1.len() });
    }
    Ok(())
}

/// Coefficients `W` minimizing the regularized objective at fixed sigma^2:
/// `(d(P 1) G + lambda sigma^2 I) W = P X - d(P 1) Y`.
pub fn solve_coefficients(
    g: &KernelMatrix,
    stats: &PosteriorStats,
    x: &PointSet,
    y: &PointSet,
    lambda: f64,
    sigma2: f64,
) -> Result<DMatrix<f64>> {
    check_stats(stats, x, y)?;
    if !(lambda > 0.0) || !(sigma2 > 0.0) {
        return Err(RegError::InvalidParameter(format!("lambda and sigma2 must be positive, got {lambda}, {sigma2}")));
    }
    if g.g.nrows() != y.count() {
        return Err(RegError::CountMismatch { expected: y.count(), got: g.g.nrows() });
    }
    solve_canonical(&g.g, &stats.p1, lambda * sigma2, &scaled_rhs(stats, y.matrix()))
}

/// `sum_mn p_mn |x_n - t_m|^2 / (N_P D)`, clamped to the floor.
///
/// Evaluated as `tr(X^T d(P^T 1) X) - 2 tr((P X)^T T) + tr(T^T d(P 1) T)`;
/// when that difference has lost most of its digits, the residual is
/// recomputed by expanding around the E-step positions.
pub fn update_sigma2_nonrigid(stats: &PosteriorStats, x: &PointSet, t: &PointSet) -> Result<f64> {
    check_stats(stats, x, t)?;
    let np = stats.np;
    if !(np > 0.0) {
        return Err(RegError::CorrespondenceCollapse { np });
    }
    let (xm, tm) = (x.matrix(), t.matrix());
    let mut tr_x = Neumaier::default();
    for j in 0..x.count() {
        tr_x.add(stats.pt1[j] * xm.row(j).norm_squared());
    }
    let mut acc = tr_x;
    for i in 0..t.count() {
        acc.add(-2.0 * stats.px.row(i).dot(&tm.row(i)));
        acc.add(stats.p1[i] * tm.row(i).norm_squared());
    }
    let dim = x.dim() as f64;
    let mut value = acc.value();
    if value <= 1e-6 * tr_x.value() && stats.t_ref.shape() == tm.shape() {
        value = stats.residual_at(tm);
    }
    if value < -1e-9 * tr_x.value().max(1.0) {
        return Err(RegError::NegativeVariance { value: value / (np * dim) });
    }
    Ok((value / (np * dim)).max(SIGMA2_FLOOR))
}

/// Regularized objective with the posteriors held fixed:
/// `residual / (2 sigma^2) + N_P D / 2 log sigma^2 + lambda / 2 tr(W^T G W)`.
pub fn nonrigid_objective(stats: &PosteriorStats, t: &DMatrix<f64>, w: &DMatrix<f64>, gw: &DMatrix<f64>, lambda: f64, sigma2: f64) -> f64 {
    let dim = t.ncols();
    q_value(stats.residual_at(t), stats.np, dim, sigma2) + 0.5 * lambda * w.dot(gw)
}

enum Solver {
    Dense(KernelMatrix),
    LowRank(LowRankKernel),
}

impl Solver {
    fn solve(&self, p1: &[f64], a: f64, rhs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        match self {
            Solver::Dense(g) => solve_canonical(&g.g, p1, a, rhs),
            Solver::LowRank(lr) => woodbury_solve(lr, p1, a, rhs),
        }
    }

    fn kernel_times(&self, w: &DMatrix<f64>) -> DMatrix<f64> {
        match self {
            Solver::Dense(g) => &g.g * w,
            Solver::LowRank(lr) => lr.apply(w),
        }
    }
}

/// Largest model for which the kernel is formed densely when building a low-rank factor.
const DENSE_KERNEL_LIMIT: usize = 4000;

fn low_rank_factor(y: &PointSet, beta: f64, k: usize, config: &RegistrationConfig) -> Result<LowRankKernel> {
    let k = k.min(y.count());
    if y.count() <= DENSE_KERNEL_LIMIT {
        let g = build_kernel(y, beta)?;
        return topk_eigs(&DenseOperator(&g.g), k, 1e-9, config.seed);
    }
    // Matrix-free products carry the expansion error, so the residual
    // target is relaxed to sit above it.
    let params = crate::fastops::FgtParams { epsilon: 1e-10, ..config.fgt.clone() };
    let op = KernelOperator { points: y.clone(), beta, plan: GaussTransformPlan::new(GaussMode::Fgt, params)? };
    topk_eigs(&op, k, 1e-6, config.seed)
}

struct NonRigidModel {
    y: PointSet,
    solver: Solver,
    w: DMatrix<f64>,
    gw: DMatrix<f64>,
    positions: DMatrix<f64>,
    lambda: f64,
    inner_iters: usize,
}

impl MStepModel for NonRigidModel {
    fn positions(&self) -> &DMatrix<f64> {
        &self.positions
    }

    fn m_step(&mut self, stats: &PosteriorStats, x: &PointSet, sigma2: f64) -> Result<MStepOutcome> {
        let q_before = nonrigid_objective(stats, &self.positions, &self.w, &self.gw, self.lambda, sigma2);
        let rhs = scaled_rhs(stats, self.y.matrix());
        let mut s2 = sigma2;
        for _ in 0..self.inner_iters {
            self.w = self.solver.solve(&stats.p1, self.lambda * s2, &rhs)?;
            self.gw = self.solver.kernel_times(&self.w);
            self.positions = self.y.matrix() + &self.gw;
            s2 = update_sigma2_nonrigid(stats, x, &PointSet::new(self.positions.clone())?)?;
        }
        let penalty = 0.5 * self.lambda * self.w.dot(&self.gw);
        let q_after = nonrigid_objective(stats, &self.positions, &self.w, &self.gw, self.lambda, s2);
        Ok(MStepOutcome { sigma2_new: s2, q_before, q_after, penalty, warnings: Vec::new() })
    }
}

/// Non-rigid registration of `y` onto `x`.
pub fn register_nonrigid(x: &PointSet, y: &PointSet, config: &RegistrationConfig) -> Result<RegistrationReport> {
    let beta = config.beta;
    em::run(
        x,
        y,
        config,
        Method::Nonrigid,
        |_, yn, diag| {
            let m = yn.count();
            let rank = match config.lowrank {
                Some(k) => Some(k),
                None if m > config.dense_solve_limit => {
                    let k = (m as f64).cbrt().ceil() as usize;
                    diag.warn(None, Warning::LowRankDefault { rank: k });
                    Some(k)
                }
                None => None,
            };
            let solver = match rank {
                Some(k) => Solver::LowRank(low_rank_factor(&yn, beta, k, config)?),
                None => Solver::Dense(build_kernel(&yn, beta)?),
            };
            let (m, d) = (yn.count(), yn.dim());
            Ok(NonRigidModel {
                positions: yn.matrix().clone(),
                y: yn,
                solver,
                w: DMatrix::zeros(m, d),
                gw: DMatrix::zeros(m, d),
                lambda: config.lambda,
                inner_iters: config.inner_iters,
            })
        },
        |model| {
            let dim = model.y.dim();
            Transform::Nonrigid(NonRigidMap {
                input: NormalizationParams::identity(dim),
                field: NonRigidField { y_ref: model.y.matrix().clone(), w_coef: model.w.clone(), beta },
                output: NormalizationParams::identity(dim),
            })
        },
    )
}
