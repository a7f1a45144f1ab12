//! Gaussian mixture posteriors shared by every registration variant.
//!
//! The model set `T(Y)` supplies `M` isotropic Gaussian centroids with a
//! common variance `sigma^2` and equal membership `1/M`; a uniform density
//! `1/N` with weight `w` absorbs outliers. The E-step never materializes the
//! `M x N` posterior matrix unless asked to: it streams over data points and
//! accumulates the products `P 1`, `P^T 1` and `P X` directly.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{RegError, Result};
use crate::pointset::{row_dist2, PointSet};

/// Lower bound on the mixture variance in normalized units.
pub const SIGMA2_FLOOR: f64 = 1e-10;

/// Variance and outlier weight of the mixture.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixtureParams {
    pub sigma2: f64,
    pub w: f64,
}

impl MixtureParams {
    pub fn new(sigma2: f64, w: f64) -> Result<Self> {
        let p = Self { sigma2, w };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma2 > 0.0) || !self.sigma2.is_finite() {
            return Err(RegError::InvalidParameter(format!("sigma2 must be positive, got {}", self.sigma2)));
        }
        if !(0.0..1.0).contains(&self.w) {
            return Err(RegError::InvalidParameter(format!("w must lie in [0, 1), got {}", self.w)));
        }
        Ok(())
    }
}

/// Initial variance: mean squared pairwise distance divided by `D`.
///
/// Returns the value together with a flag that is set when every point of
/// both sets coincides and the floor was substituted.
pub fn init_sigma2(x: &PointSet, y: &PointSet) -> Result<(f64, bool)> {
    x.check_dim(y)?;
    let (n, m, d) = (x.count(), y.count(), x.dim());
    // Sum over pairs of |x_n - y_m|^2 = M sum|x_n - c|^2 + N sum|y_m - c|^2 when c
    // is the centroid of X; this avoids the cancellation of the raw moment form.
    let c = x.centroid();
    let spread = |p: &PointSet| -> f64 {
        let mat = p.matrix();
        (0..p.count())
            .map(|i| (0..d).map(|k| (mat[(i, k)] - c[k]).powi(2)).sum::<f64>())
            .sum()
    };
    let total = m as f64 * spread(x) + n as f64 * spread(y);
    let sigma2 = total / (d as f64 * n as f64 * m as f64);
    if sigma2 > SIGMA2_FLOOR {
        Ok((sigma2, false))
    } else {
        log::warn!("all points coincide; initial sigma^2 clamped to the floor");
        Ok((SIGMA2_FLOOR, true))
    }
}

/// Outlier term of the posterior denominator,
/// `c = (2 pi sigma^2)^(D/2) * w / (1 - w) * M / N`.
pub fn outlier_constant(params: &MixtureParams, m_count: usize, n_count: usize, dim: usize) -> Result<f64> {
    params.validate()?;
    if params.w == 0.0 {
        return Ok(0.0);
    }
    let d = dim as f64;
    Ok((2.0 * std::f64::consts::PI * params.sigma2).powf(d / 2.0) * params.w / (1.0 - params.w)
        * m_count as f64
        / n_count as f64)
}

/// E-step products for one set of posterior probabilities `P (M x N)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorStats {
    /// `P 1`, length `M`.
    pub p1: Vec<f64>,
    /// `P^T 1`, length `N`.
    pub pt1: Vec<f64>,
    /// `P X`, `M x D`.
    pub px: DMatrix<f64>,
    /// Total mass assigned to the Gaussian components.
    pub np: f64,
    /// `sum_n p_mn |x_n - t_m|^2` per model point, measured at `t_ref`.
    pub p_sqdist: Vec<f64>,
    /// Model positions the posteriors were computed against.
    pub t_ref: DMatrix<f64>,
    /// Negative log-likelihood at the parameters used for this E-step.
    pub nll: f64,
    pub dense_p: Option<DMatrix<f64>>,
}

impl PosteriorStats {
    /// Products of an explicit posterior matrix `p (M x N)` against model
    /// positions `t_ref`. The likelihood is unknown and left as NaN.
    pub fn from_dense(p: DMatrix<f64>, x: &PointSet, t_ref: &PointSet) -> Result<Self> {
        x.check_dim(t_ref)?;
        let (m, n) = (t_ref.count(), x.count());
        if p.shape() != (m, n) {
            return Err(RegError::CountMismatch { expected: m * n, got: p.nrows() * p.ncols() });
        }
        let p1: Vec<f64> = p.row_iter().map(|r| r.sum()).collect();
        let pt1: Vec<f64> = p.column_iter().map(|c| c.sum()).collect();
        let px = &p * x.matrix();
        let (xm, tm) = (x.matrix(), t_ref.matrix());
        let p_sqdist = (0..m)
            .map(|i| {
                let mut acc = Neumaier::default();
                for j in 0..n {
                    acc.add(p[(i, j)] * row_dist2(xm, j, tm, i));
                }
                acc.value()
            })
            .collect();
        let np = pt1.iter().sum();
        Ok(Self { p1, pt1, px, np, p_sqdist, t_ref: tm.clone(), nll: f64::NAN, dense_p: Some(p) })
    }

    pub fn model_count(&self) -> usize {
        self.p1.len()
    }

    pub fn data_count(&self) -> usize {
        self.pt1.len()
    }

    /// `sum_mn p_mn |x_n - t_m|^2` for new model positions `t`.
    ///
    /// Expands around `t_ref` so that the dominant term is a sum of
    /// non-negative values; the cross terms are small when `t` is close to
    /// `t_ref`, which keeps the result accurate near convergence.
    pub fn residual_at(&self, t: &DMatrix<f64>) -> f64 {
        let (m, d) = self.t_ref.shape();
        let mut acc = Neumaier::default();
        for i in 0..m {
            acc.add(self.p_sqdist[i]);
            let mut cross = 0.0;
            let mut shift2 = 0.0;
            for k in 0..d {
                let delta = self.t_ref[(i, k)] - t[(i, k)];
                cross += delta * (self.px[(i, k)] - self.p1[i] * self.t_ref[(i, k)]);
                shift2 += delta * delta;
            }
            acc.add(2.0 * cross);
            acc.add(self.p1[i] * shift2);
        }
        acc.value()
    }
}

/// Compensated (Kahan-Babuska-Neumaier) summation.
#[derive(Debug, Default, Clone, Copy)]
pub(crate) struct Neumaier {
    sum: f64,
    comp: f64,
}

impl Neumaier {
    pub(crate) fn add(&mut self, v: f64) {
        let t = self.sum + v;
        if self.sum.abs() >= v.abs() {
            self.comp += (self.sum - t) + v;
        } else {
            self.comp += (v - t) + self.sum;
        }
        self.sum = t;
    }

    pub(crate) fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

fn log_add_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let hi = a.max(b);
    hi + ((a - hi).exp() + (b - hi).exp()).ln()
}

/// One data point's posteriors over every model point: `p_i = e[i] * a`.
pub(crate) struct Column {
    /// Squared distances to the model points.
    pub d2: Vec<f64>,
    /// Kernel values relative to the nearest model point.
    pub e: Vec<f64>,
}

impl Column {
    pub fn new(m: usize) -> Self {
        Self { d2: vec![0.0; m], e: vec![0.0; m] }
    }

    /// Fills `d2` and `e` for data point `xj`; returns `a`, the column's
    /// `P^T 1` entry and its negative log-likelihood term without the
    /// normalization constant.
    pub fn evaluate(&mut self, xj: &[f64], ts: &[f64], inv2s: f64, ln_c: f64) -> (f64, f64, f64) {
        let d = xj.len();
        let mut dmin = f64::INFINITY;
        for (i, slot) in self.d2.iter_mut().enumerate() {
            let ti = &ts[i * d..(i + 1) * d];
            let mut acc = 0.0;
            for k in 0..d {
                let diff = xj[k] - ti[k];
                acc += diff * diff;
            }
            *slot = acc;
            dmin = dmin.min(acc);
        }
        let mut s = 0.0;
        for (e, d2) in self.e.iter_mut().zip(&self.d2) {
            *e = (-(d2 - dmin) * inv2s).exp();
            s += *e;
        }
        if s > 0.0 && s.is_finite() {
            let ln_denom = log_add_exp(s.ln(), ln_c + dmin * inv2s);
            let a = (-ln_denom).exp();
            // Divided rather than `s * a` so that `c = 0` gives exactly 1.
            let pt1 = s / (s + (ln_c + dmin * inv2s).exp());
            (a, pt1, dmin * inv2s - ln_denom)
        } else {
            // Unreachable with the column-minimum shift; kept so a broken
            // distance never produces NaN posteriors.
            self.e.iter_mut().for_each(|v| *v = 1.0);
            (1.0 / self.e.len() as f64, 1.0, f64::INFINITY)
        }
    }
}

/// Posterior probabilities of correspondence and their products.
///
/// `p_mn = exp(-|x_n - t_m|^2 / 2 sigma^2) / (sum_k exp(-|x_n - t_k|^2 / 2 sigma^2) + c)`.
/// Each column is evaluated relative to its smallest squared distance, with
/// `c` rescaled in log space, so the numerators cannot all underflow.
pub fn compute_posteriors(
    x: &PointSet,
    t_y: &PointSet,
    params: &MixtureParams,
    want_dense: bool,
) -> Result<PosteriorStats> {
    x.check_dim(t_y)?;
    params.validate()?;
    let (n, m, d) = (x.count(), t_y.count(), x.dim());
    let c = outlier_constant(params, m, n, d)?;
    let ln_c = if c > 0.0 { c.ln() } else { f64::NEG_INFINITY };
    let inv2s = 0.5 / params.sigma2;
    let ln_norm = ((1.0 - params.w) / m as f64).ln()
        - 0.5 * d as f64 * (2.0 * std::f64::consts::PI * params.sigma2).ln();

    let xs = x.to_row_major();
    let ts = t_y.to_row_major();
    let mut p1 = vec![0.0; m];
    let mut pt1 = vec![0.0; n];
    let mut px = vec![0.0; m * d];
    let mut p_sqdist = vec![0.0; m];
    let mut dense = if want_dense { Some(DMatrix::zeros(m, n)) } else { None };
    let mut col = Column::new(m);
    let mut nll = Neumaier::default();

    for j in 0..n {
        let xj = &xs[j * d..(j + 1) * d];
        let (a, col_pt1, col_nll) = col.evaluate(xj, &ts, inv2s, ln_c);
        nll.add(col_nll - ln_norm);
        pt1[j] = col_pt1;
        for i in 0..m {
            let p = col.e[i] * a;
            if p == 0.0 {
                continue;
            }
            p1[i] += p;
            let row = &mut px[i * d..(i + 1) * d];
            for k in 0..d {
                row[k] += p * xj[k];
            }
            p_sqdist[i] += p * col.d2[i];
            if let Some(dm) = dense.as_mut() {
                dm[(i, j)] = p;
            }
        }
    }

    let np = pt1.iter().sum();
    Ok(PosteriorStats {
        p1,
        pt1,
        px: DMatrix::from_row_slice(m, d, &px),
        np,
        p_sqdist,
        t_ref: t_y.matrix().clone(),
        nll: nll.value(),
        dense_p: dense,
    })
}

/// Expected complete-data objective (up to constants) with the posteriors held fixed:
/// `Q = 1/(2 sigma^2) sum_mn p_mn |x_n - t_m|^2 + N_P D / 2 log sigma^2`.
///
/// Uses the materialized posterior matrix; this is the slow diagnostic path.
pub fn objective_q(stats: &PosteriorStats, x: &PointSet, t_y: &PointSet, sigma2_new: f64) -> Result<f64> {
    if !(sigma2_new > 0.0) {
        return Err(RegError::InvalidParameter(format!("sigma2 must be positive, got {sigma2_new}")));
    }
    x.check_dim(t_y)?;
    let p = stats
        .dense_p
        .as_ref()
        .ok_or_else(|| RegError::InvalidParameter("objective_q needs the dense posterior matrix".into()))?;
    if p.nrows() != t_y.count() || p.ncols() != x.count() {
        return Err(RegError::CountMismatch { expected: p.nrows() * p.ncols(), got: t_y.count() * x.count() });
    }
    let (xm, tm) = (x.matrix(), t_y.matrix());
    let mut acc = Neumaier::default();
    for j in 0..x.count() {
        for i in 0..t_y.count() {
            let pij = p[(i, j)];
            if pij != 0.0 {
                acc.add(pij * row_dist2(xm, j, tm, i));
            }
        }
    }
    let d = x.dim() as f64;
    Ok(acc.value() / (2.0 * sigma2_new) + 0.5 * stats.np * d * sigma2_new.ln())
}

/// Negative log-likelihood of the data under the mixture,
/// `E = -sum_n log(w / N + (1 - w) / M sum_m N(x_n | t_m, sigma^2))`.
///
/// Returns `+inf` rather than failing when a data point has zero density.
pub fn negative_log_likelihood(x: &PointSet, t_y: &PointSet, params: &MixtureParams) -> Result<f64> {
    x.check_dim(t_y)?;
    params.validate()?;
    let (n, m, d) = (x.count(), t_y.count(), x.dim());
    let inv2s = 0.5 / params.sigma2;
    let ln_gauss = ((1.0 - params.w) / m as f64).ln()
        - 0.5 * d as f64 * (2.0 * std::f64::consts::PI * params.sigma2).ln();
    let ln_uniform = if params.w > 0.0 { (params.w / n as f64).ln() } else { f64::NEG_INFINITY };
    let (xm, tm) = (x.matrix(), t_y.matrix());
    let mut total = Neumaier::default();
    let mut d2 = vec![0.0; m];
    for j in 0..n {
        let mut dmin = f64::INFINITY;
        for (i, slot) in d2.iter_mut().enumerate() {
            *slot = row_dist2(xm, j, tm, i);
            dmin = dmin.min(*slot);
        }
        if !dmin.is_finite() {
            if ln_uniform.is_finite() {
                total.add(-ln_uniform);
                continue;
            }
            return Ok(f64::INFINITY);
        }
        let s: f64 = d2.iter().map(|v| (-(v - dmin) * inv2s).exp()).sum();
        let ln_mix = ln_gauss - dmin * inv2s + s.ln();
        let ln_p = log_add_exp(ln_mix, ln_uniform);
        if !ln_p.is_finite() {
            return Ok(f64::INFINITY);
        }
        total.add(-ln_p);
    }
    Ok(total.value())
}

/// Hard correspondences: for each data point, the index of the model point
/// with the largest posterior, i.e. the nearest transformed model point.
pub fn hard_assignments(x: &PointSet, t_y: &PointSet) -> Result<Vec<usize>> {
    x.check_dim(t_y)?;
    let (xm, tm) = (x.matrix(), t_y.matrix());
    Ok((0..x.count())
        .map(|j| {
            let mut best = (0, f64::INFINITY);
            for i in 0..t_y.count() {
                let dd = row_dist2(xm, j, tm, i);
                if dd < best.1 {
                    best = (i, dd);
                }
            }
            best.0
        })
        .collect())
}
