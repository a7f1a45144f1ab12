//! Closed-form rigid (similarity) and affine M-steps and their EM drivers.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::config::RegistrationConfig;
use crate::em::{self, MStepModel, MStepOutcome};
use crate::error::{RegError, Result};
use crate::estep::{Neumaier, PosteriorStats, SIGMA2_FLOOR};
use crate::pointset::PointSet;
use crate::report::{Method, RegistrationReport, Warning};
use crate::serde_mat;
use crate::transform::Transform;

/// `T(y) = s R y + t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform {
    #[serde(with = "serde_mat::matrix")]
    pub r: DMatrix<f64>,
    pub s: f64,
    #[serde(with = "serde_mat::vector")]
    pub t: DVector<f64>,
}

impl RigidTransform {
    pub fn identity(dim: usize) -> Self {
        Self { r: DMatrix::identity(dim, dim), s: 1.0, t: DVector::zeros(dim) }
    }

    pub fn dim(&self) -> usize {
        self.t.len()
    }

    pub fn apply(&self, pts: &PointSet) -> Result<PointSet> {
        check_transform_dim(self.dim(), pts)?;
        // rows: s y R^T + 1 t^T
        let mut out = pts.matrix() * self.r.transpose() * self.s;
        for mut row in out.row_iter_mut() {
            row += self.t.transpose();
        }
        PointSet::new(out)
    }

    /// Inverse map `y = (1/s) R^T (x - t)`.
    pub fn inverse(&self) -> Self {
        let rt = self.r.transpose();
        let t = -(&rt * &self.t) / self.s;
        Self { r: rt, s: 1.0 / self.s, t }
    }
}

/// `T(y) = B y + t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffineTransform {
    #[serde(with = "serde_mat::matrix")]
    pub b: DMatrix<f64>,
    #[serde(with = "serde_mat::vector")]
    pub t: DVector<f64>,
}

impl AffineTransform {
    pub fn identity(dim: usize) -> Self {
        Self { b: DMatrix::identity(dim, dim), t: DVector::zeros(dim) }
    }

    pub fn dim(&self) -> usize {
        self.t.len()
    }

    pub fn apply(&self, pts: &PointSet) -> Result<PointSet> {
        check_transform_dim(self.dim(), pts)?;
        let mut out = pts.matrix() * self.b.transpose();
        for mut row in out.row_iter_mut() {
            row += self.t.transpose();
        }
        PointSet::new(out)
    }
}

fn check_transform_dim(dim: usize, pts: &PointSet) -> Result<()> {
    if pts.dim() != dim {
        return Err(RegError::DimensionMismatch { expected: dim, got: pts.dim() });
    }
    Ok(())
}

/// Rotation maximizing `tr(A^T R)` over proper rotations.
#[derive(Debug, Clone)]
pub struct RotationSolution {
    pub rotation: DMatrix<f64>,
    /// Set when a reflection had to be removed while the two smallest
    /// singular values coincide, so the maximizer is not unique.
    pub degenerate: bool,
}

/// `R = U C V^T` with `A = U S V^T` and `C = diag(1, ..., 1, det(U V^T))`.
pub fn solve_rotation(a: &DMatrix<f64>) -> Result<RotationSolution> {
    let d = a.nrows();
    if d == 0 || a.ncols() != d {
        return Err(RegError::InvalidParameter(format!("rotation solve needs a square matrix, got {}x{}", a.nrows(), a.ncols())));
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(RegError::InvalidParameter("rotation solve input is not finite".into()));
    }
    // `svd` orders singular values descending, so the sign fix lands on the smallest.
    let svd = a.clone().svd(true, true);
    let u = svd.u.expect("requested U");
    let v_t = svd.v_t.expect("requested V^T");
    let det = (&u * &v_t).determinant();
    let mut c = DVector::from_element(d, 1.0);
    let flip = det < 0.0;
    if flip {
        c[d - 1] = -1.0;
    }
    let rotation = &u * DMatrix::from_diagonal(&c) * &v_t;
    let sv = &svd.singular_values;
    let degenerate = flip && d >= 2 && {
        let (lo, next) = (sv[d - 1], sv[d - 2]);
        (next - lo).abs() <= 1e-12 * sv[0].max(f64::MIN_POSITIVE)
    };
    Ok(RotationSolution { rotation, degenerate })
}

/// Weighted centering shared by the rigid and affine M-steps.
struct Moments {
    mu_x: DVector<f64>,
    mu_y: DVector<f64>,
    /// `X^T P^T Y` with both sets centered.
    a: DMatrix<f64>,
    /// `tr(Xc^T d(P^T 1) Xc)`.
    tr_x: f64,
    /// `Yc^T d(P 1) Yc`.
    yy: DMatrix<f64>,
}

fn moments(stats: &PosteriorStats, x: &PointSet, y: &PointSet) -> Result<Moments> {
    x.check_dim(y)?;
    let (n, m, d) = (x.count(), y.count(), x.dim());
    if stats.pt1.len() != n || stats.p1.len() != m || stats.px.shape() != (m, d) {
        return Err(RegError::CountMismatch { expected: m * n, got: stats.p1.len() * stats.pt1.len() });
    }
    let np = stats.np;
    if !(np > 1e-12 * n as f64) {
        return Err(RegError::CorrespondenceCollapse { np });
    }
    let xm = x.matrix();
    let ym = y.matrix();
    let pt1 = DVector::from_column_slice(&stats.pt1);
    let p1 = DVector::from_column_slice(&stats.p1);
    let mu_x = xm.transpose() * &pt1 / np;
    let mu_y = ym.transpose() * &p1 / np;

    let mut yc = ym.clone();
    for mut row in yc.row_iter_mut() {
        row -= mu_y.transpose();
    }
    // A = sum_m (px_m - p1_m mu_x) yc_m^T
    let mut pxc = stats.px.clone();
    for i in 0..m {
        for k in 0..d {
            pxc[(i, k)] -= p1[i] * mu_x[k];
        }
    }
    let a = pxc.transpose() * &yc;

    let mut tr_x = Neumaier::default();
    for j in 0..n {
        let mut r = 0.0;
        for k in 0..d {
            r += (xm[(j, k)] - mu_x[k]).powi(2);
        }
        tr_x.add(pt1[j] * r);
    }
    let mut ycw = yc.clone();
    for i in 0..m {
        ycw.row_mut(i).scale_mut(p1[i]);
    }
    let yy = yc.transpose() * ycw;
    Ok(Moments { mu_x, mu_y, a, tr_x: tr_x.value(), yy })
}

/// Variance from the trace expression, falling back to the expansion around
/// the E-step positions when the subtraction has cancelled most digits.
fn variance_update(trace_value: f64, reference: f64, stats: &PosteriorStats, t_new: &DMatrix<f64>, dim: usize) -> Result<f64> {
    let denom = stats.np * dim as f64;
    let value = if trace_value > 1e-6 * reference {
        trace_value
    } else {
        let acc = stats.residual_at(t_new);
        if acc < -1e-9 {
            return Err(RegError::NegativeVariance { value: acc / denom });
        }
        acc
    };
    Ok((value / denom).max(SIGMA2_FLOOR))
}

/// Result of one rigid M-step.
#[derive(Debug, Clone)]
pub struct RigidStep {
    pub transform: RigidTransform,
    pub sigma2: f64,
    pub warnings: Vec<Warning>,
}

pub fn rigid_mstep(stats: &PosteriorStats, x: &PointSet, y: &PointSet, estimate_scale: bool) -> Result<RigidStep> {
    let mo = moments(stats, x, y)?;
    let d = x.dim();
    let mut warnings = Vec::new();
    let rot = solve_rotation(&mo.a)?;
    if rot.degenerate {
        warnings.push(Warning::DegenerateRotation);
    }
    let r = rot.rotation;
    let tr_ar = (mo.a.transpose() * &r).trace();
    let tr_y = mo.yy.trace();
    let s = if !estimate_scale {
        1.0
    } else if tr_y > 0.0 {
        tr_ar / tr_y
    } else {
        warnings.push(Warning::ZeroModelSpread);
        1.0
    };
    if s < 0.0 {
        warnings.push(Warning::NegativeScale);
    }
    let t = &mo.mu_x - &r * &mo.mu_y * s;
    let transform = RigidTransform { r, s, t };
    let t_new = transform.apply(y)?.into_matrix();
    // With the optimal s this reduces to tr_x - s tr(A^T R).
    let trace_value = mo.tr_x - 2.0 * s * tr_ar + s * s * tr_y;
    let sigma2 = variance_update(trace_value, mo.tr_x, stats, &t_new, d)?;
    Ok(RigidStep { transform, sigma2, warnings })
}

#[derive(Debug, Clone)]
pub struct AffineStep {
    pub transform: AffineTransform,
    pub sigma2: f64,
    pub warnings: Vec<Warning>,
}

pub fn affine_mstep(stats: &PosteriorStats, x: &PointSet, y: &PointSet) -> Result<AffineStep> {
    let mo = moments(stats, x, y)?;
    let d = x.dim();
    let mut warnings = Vec::new();
    let trace = mo.yy.trace();
    let eig = mo.yy.clone().symmetric_eigen();
    let (emin, emax) = eig
        .eigenvalues
        .iter()
        .fold((f64::INFINITY, 0.0f64), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let mut yy = mo.yy.clone();
    if !(emin > 1e-12 * emax) {
        warnings.push(Warning::SingularAffine);
        let ridge = 1e-10 * trace.max(f64::MIN_POSITIVE) / d as f64;
        for k in 0..d {
            yy[(k, k)] += ridge;
        }
    }
    // B = A yy^{-1}  <=>  yy B^T = A^T
    let chol = yy.clone().cholesky().ok_or(RegError::NonFiniteSolve { condition: emax / emin.max(f64::MIN_POSITIVE) })?;
    let b = chol.solve(&mo.a.transpose()).transpose();
    if b.iter().any(|v| !v.is_finite()) {
        return Err(RegError::NonFiniteSolve { condition: emax / emin.max(f64::MIN_POSITIVE) });
    }
    let t = &mo.mu_x - &b * &mo.mu_y;
    let transform = AffineTransform { b, t };
    let t_new = transform.apply(y)?.into_matrix();
    let tr_ab = (&mo.a * transform.b.transpose()).trace();
    let sigma2 = variance_update(mo.tr_x - tr_ab, mo.tr_x, stats, &t_new, d)?;
    Ok(AffineStep { transform, sigma2, warnings })
}

/// `Q` (up to constants) for a fixed posterior: residual / (2 sigma^2) + N_P D / 2 log sigma^2.
pub(crate) fn q_value(residual: f64, np: f64, dim: usize, sigma2: f64) -> f64 {
    residual / (2.0 * sigma2) + 0.5 * np * dim as f64 * sigma2.ln()
}

struct RigidModel {
    y: PointSet,
    transform: RigidTransform,
    positions: DMatrix<f64>,
    estimate_scale: bool,
}

impl MStepModel for RigidModel {
    fn positions(&self) -> &DMatrix<f64> {
        &self.positions
    }

    fn m_step(&mut self, stats: &PosteriorStats, x: &PointSet, sigma2: f64) -> Result<MStepOutcome> {
        let d = x.dim();
        let q_before = q_value(stats.p_sqdist.iter().sum(), stats.np, d, sigma2);
        let step = rigid_mstep(stats, x, &self.y, self.estimate_scale)?;
        let t_new = step.transform.apply(&self.y)?.into_matrix();
        let q_after = q_value(stats.residual_at(&t_new), stats.np, d, step.sigma2);
        self.transform = step.transform;
        self.positions = t_new;
        Ok(MStepOutcome { sigma2_new: step.sigma2, q_before, q_after, penalty: 0.0, warnings: step.warnings })
    }
}

struct AffineModel {
    y: PointSet,
    transform: AffineTransform,
    positions: DMatrix<f64>,
}

impl MStepModel for AffineModel {
    fn positions(&self) -> &DMatrix<f64> {
        &self.positions
    }

    fn m_step(&mut self, stats: &PosteriorStats, x: &PointSet, sigma2: f64) -> Result<MStepOutcome> {
        let d = x.dim();
        let q_before = q_value(stats.p_sqdist.iter().sum(), stats.np, d, sigma2);
        let step = affine_mstep(stats, x, &self.y)?;
        let t_new = step.transform.apply(&self.y)?.into_matrix();
        let q_after = q_value(stats.residual_at(&t_new), stats.np, d, step.sigma2);
        self.transform = step.transform;
        self.positions = t_new;
        Ok(MStepOutcome { sigma2_new: step.sigma2, q_before, q_after, penalty: 0.0, warnings: step.warnings })
    }
}

/// Rigid (similarity) registration of `y` onto `x`.
pub fn register_rigid(x: &PointSet, y: &PointSet, config: &RegistrationConfig) -> Result<RegistrationReport> {
    em::run(
        x,
        y,
        config,
        Method::Rigid,
        |_, yn, _| {
            Ok(RigidModel {
                transform: RigidTransform::identity(yn.dim()),
                positions: yn.matrix().clone(),
                y: yn,
                estimate_scale: config.estimate_scale,
            })
        },
        |model| Transform::Rigid(model.transform.clone()),
    )
}

/// Affine registration of `y` onto `x`.
pub fn register_affine(x: &PointSet, y: &PointSet, config: &RegistrationConfig) -> Result<RegistrationReport> {
    em::run(
        x,
        y,
        config,
        Method::Affine,
        |_, yn, _| {
            Ok(AffineModel { transform: AffineTransform::identity(yn.dim()), positions: yn.matrix().clone(), y: yn })
        },
        |model| Transform::Affine(model.transform.clone()),
    )
}

/// Applies a rigid or affine transform to a point set.
pub fn apply_transform(t: &Transform, pts: &PointSet) -> Result<PointSet> {
    t.apply(pts)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rot2(theta: f64) -> DMatrix<f64> {
        DMatrix::from_row_slice(2, 2, &[theta.cos(), -theta.sin(), theta.sin(), theta.cos()])
    }

    #[test]
    fn rotation_of_identity_and_positive_diagonal() {
        for d in 1..5 {
            let r = solve_rotation(&DMatrix::identity(d, d)).unwrap().rotation;
            assert!((r - DMatrix::<f64>::identity(d, d)).norm() < 1e-14);
        }
        let a = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 1.0]);
        let r = solve_rotation(&a).unwrap().rotation;
        assert!((r - DMatrix::<f64>::identity(2, 2)).norm() < 1e-14);
    }

    #[test]
    fn reflection_is_removed() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -3.0]);
        let sol = solve_rotation(&a).unwrap();
        assert!((sol.rotation.determinant() - 1.0).abs() < 1e-12);
        assert!(!sol.degenerate);
        let a = DMatrix::from_row_slice(3, 3, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, -1.0]);
        let sol = solve_rotation(&a).unwrap();
        assert!(sol.degenerate);
        assert!((sol.rotation.determinant() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rotated_diagonal_recovers_rotation() {
        let th = 30f64.to_radians();
        let a = rot2(th) * DMatrix::from_row_slice(2, 2, &[3.0, 0.0, 0.0, 1.0]);
        let r = solve_rotation(&a).unwrap().rotation;
        assert!((r - rot2(th)).norm() < 1e-12);
    }

    #[test]
    fn rigid_inverse_round_trip() {
        let tr = RigidTransform { r: rot2(0.7), s: 1.3, t: DVector::from_vec(vec![0.5, -2.0]) };
        let p = PointSet::from_rows(&[vec![1.0, 2.0], vec![-3.0, 0.25]]).unwrap();
        let back = tr.inverse().apply(&tr.apply(&p).unwrap()).unwrap();
        assert!((back.matrix() - p.matrix()).norm() < 1e-12);
    }

    #[test]
    fn basis_images() {
        let tr = RigidTransform { r: rot2(std::f64::consts::FRAC_PI_2), s: 2.0, t: DVector::from_vec(vec![1.0, 0.0]) };
        let p = PointSet::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let q = tr.apply(&p).unwrap();
        let expected = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, -1.0, 0.0]);
        assert!((q.matrix() - expected).norm() < 1e-14);
    }

    #[test]
    fn dimension_mismatch_on_apply() {
        let p = PointSet::from_rows(&[vec![1.0, 0.0, 2.0]]).unwrap();
        assert!(RigidTransform::identity(2).apply(&p).is_err());
        assert!(AffineTransform::identity(2).apply(&p).is_err());
    }
}
