//! Fast Gaussian summation for the E-step and low-rank kernel solves.
//!
//! A Gauss transform evaluates `f(y_m) = sum_n z_n exp(-|x_n - y_m|^2 / 2 sigma^2)`
//! for every target `y_m`. Three evaluators are provided: the exact double
//! loop, a clustered Hermite expansion, and a truncated kernel on a spatial grid.

mod fgt;
mod grid;
mod lowrank;
mod truncated;

pub use lowrank::{
    kernel_spectrum, topk_eigs, woodbury_solve, DenseOperator, KernelOperator, LowRankKernel, SymmetricOperator,
};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{RegError, Result};
use crate::estep::{compute_posteriors, outlier_constant, Column, MixtureParams, Neumaier, PosteriorStats};
use crate::pointset::PointSet;

/// Tuning of the fast evaluators.
///
/// `far_field_ratio` is the cutoff distance in units of `h = sqrt(2) sigma`:
/// a cluster whose nearest possible source is farther than `far_field_ratio * h`
/// from a target is skipped, costing at most `exp(-far_field_ratio^2)` per unit
/// weight. When unset it is derived from `epsilon`. Sources are clustered
/// on grid cells small enough that every cluster fits in `cluster_radius * h`;
/// the cells are coarsened if more than `centers` would be occupied.
/// `order` is the minimum total degree of an expansion; the degree is raised
/// per target until the truncation bound meets `epsilon`, and pairs that would
/// need more than `max_order` are summed directly.
///
/// For posteriors, a data point with no model point within
/// `isolation_radius * h` is summed exactly; every other point has kernel
/// mass at least `exp(-isolation_radius^2)`, and the cutoffs are widened so
/// the dropped tail stays below `epsilon` relative to that mass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FgtParams {
    pub far_field_ratio: Option<f64>,
    pub centers: usize,
    pub cluster_radius: f64,
    pub order: usize,
    pub max_order: usize,
    /// Absolute accuracy per unit of `|weights|_1`.
    pub epsilon: f64,
    /// Cutoff of the truncated kernel, in units of sigma. Widened when needed
    /// so that the dropped tail stays below `epsilon`.
    pub truncation_radius: f64,
    /// `auto` switches to the truncated kernel once `sigma < switch_fraction * data_scale`.
    pub switch_fraction: f64,
    /// In units of `h`.
    pub isolation_radius: f64,
}

impl Default for FgtParams {
    fn default() -> Self {
        Self {
            far_field_ratio: None,
            centers: 1 << 16,
            cluster_radius: 0.5,
            order: 5,
            max_order: 24,
            epsilon: 1e-6,
            truncation_radius: 5.0,
            switch_fraction: 0.01,
            isolation_radius: 2.5,
        }
    }
}

impl FgtParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(RegError::InvalidParameter(m.to_string()));
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return bad("fgt epsilon must lie in (0, 1)");
        }
        if self.order < 1 || self.max_order < self.order {
            return bad("fgt order must be at least 1 and not exceed max_order");
        }
        if self.centers < 1 {
            return bad("fgt center count must be at least 1");
        }
        if self.far_field_ratio.is_some_and(|r| !(r > 0.0)) || !(self.truncation_radius > 0.0) || !(self.cluster_radius > 0.0)
            || !(self.isolation_radius > 0.0)
        {
            return bad("fgt cutoff ratios must be positive");
        }
        if !(self.switch_fraction >= 0.0) {
            return bad("switch_fraction must be non-negative");
        }
        Ok(())
    }

    /// Far-field cutoff in units of `h`; by default the distance at which the
    /// kernel falls to half of `epsilon`.
    pub fn cutoff_ratio(&self) -> f64 {
        self.far_field_ratio.unwrap_or_else(|| (-(0.5 * self.epsilon).ln()).sqrt())
    }

    /// Truncated-kernel cutoff in units of sigma, never narrower than the
    /// radius at which a unit Gaussian drops below `epsilon`.
    pub fn effective_truncation_radius(&self) -> f64 {
        self.truncation_radius.max((-2.0 * self.epsilon.ln()).sqrt())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GaussMode {
    Exact,
    Fgt,
    Truncated,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussTransformPlan {
    pub mode: GaussMode,
    pub params: FgtParams,
}

impl GaussTransformPlan {
    pub fn new(mode: GaussMode, params: FgtParams) -> Result<Self> {
        params.validate()?;
        Ok(Self { mode, params })
    }

    pub fn exact() -> Self {
        Self { mode: GaussMode::Exact, params: FgtParams::default() }
    }

    pub fn fgt() -> Self {
        Self { mode: GaussMode::Fgt, params: FgtParams::default() }
    }

    pub fn truncated() -> Self {
        Self { mode: GaussMode::Truncated, params: FgtParams::default() }
    }

    pub fn with_mode(&self, mode: GaussMode) -> Self {
        Self { mode, params: self.params.clone() }
    }
}

/// `out[m, c] = sum_n weights[n, c] exp(-|sources_n - targets_m|^2 / 2 sigma^2)`.
///
/// `weights` has one row per source and any number of columns. For the fgt
/// and truncated modes the error in column `c` is at most
/// `epsilon * |weights[:, c]|_1`.
pub fn gauss_transform(
    sources: &PointSet,
    targets: &PointSet,
    weights: &DMatrix<f64>,
    sigma2: f64,
    plan: &GaussTransformPlan,
) -> Result<DMatrix<f64>> {
    sources.check_dim(targets)?;
    if weights.nrows() != sources.count() {
        return Err(RegError::CountMismatch { expected: sources.count(), got: weights.nrows() });
    }
    if !(sigma2 > 0.0) || !sigma2.is_finite() {
        return Err(RegError::InvalidParameter(format!("sigma2 must be positive, got {sigma2}")));
    }
    if weights.iter().any(|v| !v.is_finite()) {
        return Err(RegError::InvalidParameter("gauss transform weights must be finite".into()));
    }
    plan.params.validate()?;
    match plan.mode {
        GaussMode::Exact => Ok(exact_transform(sources, targets, weights, sigma2)),
        GaussMode::Truncated => Ok(truncated::transform(sources, targets, weights, sigma2, &plan.params)),
        GaussMode::Fgt => {
            if sources.dim() > 3 {
                log::warn!("fast Gauss transform supports D <= 3; using exact evaluation for D = {}", sources.dim());
                return Ok(exact_transform(sources, targets, weights, sigma2));
            }
            let start = std::time::Instant::now();
            let out = fgt::transform(sources, targets, weights, sigma2, &plan.params);
            log::debug!("fgt: {} columns in {:.3} s", weights.ncols(), start.elapsed().as_secs_f64());
            Ok(out)
        }
    }
}

fn exact_transform(sources: &PointSet, targets: &PointSet, weights: &DMatrix<f64>, sigma2: f64) -> DMatrix<f64> {
    let d = sources.dim();
    let cols = weights.ncols();
    let src = sources.to_row_major();
    let tgt = targets.to_row_major();
    let w = row_major(weights);
    let inv2s = 0.5 / sigma2;
    let mut out = vec![0.0; targets.count() * cols];
    for (m, y) in tgt.chunks_exact(d).enumerate() {
        let acc = &mut out[m * cols..(m + 1) * cols];
        for (n, x) in src.chunks_exact(d).enumerate() {
            let mut d2 = 0.0;
            for k in 0..d {
                let diff = y[k] - x[k];
                d2 += diff * diff;
            }
            let g = (-d2 * inv2s).exp();
            let wn = &w[n * cols..(n + 1) * cols];
            for c in 0..cols {
                acc[c] += g * wn[c];
            }
        }
    }
    DMatrix::from_row_slice(targets.count(), cols, &out)
}

pub(crate) fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    let (r, c) = m.shape();
    let mut out = Vec::with_capacity(r * c);
    for i in 0..r {
        for j in 0..c {
            out.push(m[(i, j)]);
        }
    }
    out
}

/// Picks the evaluator for `auto` acceleration: the truncated kernel once
/// `sigma < switch_fraction * data_scale`, the expansion otherwise.
pub fn truncation_switch(sigma2: f64, data_scale: f64, plan: &GaussTransformPlan) -> GaussMode {
    if sigma2.sqrt() < plan.params.switch_fraction * data_scale {
        GaussMode::Truncated
    } else {
        GaussMode::Fgt
    }
}

/// Cutoffs for posterior sums: a point with mass at least `exp(-rho^2)`
/// loses at most `epsilon` of it when the cutoff is `sqrt(rho^2 - ln(epsilon / 2))` h.
fn posterior_plan(plan: &GaussTransformPlan) -> GaussTransformPlan {
    let mut out = plan.clone();
    let p = &plan.params;
    let ratio = (p.isolation_radius.powi(2) - (0.5 * p.epsilon).ln()).sqrt();
    out.params.truncation_radius = p.truncation_radius.max(std::f64::consts::SQRT_2 * ratio);
    if out.params.far_field_ratio.is_none() {
        out.params.far_field_ratio = Some(ratio);
    }
    out
}

/// Data points with no model point within `radius`.
fn isolated_points(x: &PointSet, t_y: &PointSet, radius: f64) -> Vec<usize> {
    let d = x.dim();
    let ys = t_y.to_row_major();
    let grid = truncated::Grid::new(&ys, d, radius);
    let xs = x.to_row_major();
    (0..x.count()).filter(|&n| !grid.any_within(&ys, &xs[n * d..(n + 1) * d], radius)).collect()
}

/// E-step products from Gauss transforms: `a = 1 / (K^T 1 + c)`,
/// `P^T 1 = 1 - c a`, `P 1 = K a`, `P X = K (a .* X)`.
///
/// `K[m, n] = exp(-|x_n - t_m|^2 / 2 sigma^2)` is never formed. Isolated data
/// points (see [`FgtParams`]) are summed exactly over all model points. A data
/// point with zero kernel mass and `c = 0` gets `a = 0`, so it contributes nothing.
pub fn posterior_products_fast(
    x: &PointSet,
    t_y: &PointSet,
    params: &MixtureParams,
    plan: &GaussTransformPlan,
) -> Result<PosteriorStats> {
    x.check_dim(t_y)?;
    params.validate()?;
    let (n, m, d) = (x.count(), t_y.count(), x.dim());
    let sigma2 = params.sigma2;
    let c = outlier_constant(params, m, n, d)?;
    let plan = &posterior_plan(plan);
    let isolated = if plan.mode == GaussMode::Exact {
        Vec::new()
    } else {
        isolated_points(x, t_y, plan.params.isolation_radius * (2.0 * sigma2).sqrt())
    };
    if 2 * isolated.len() > n {
        // Summing the isolated points exactly would cost more than everything.
        log::debug!("{} of {n} data points isolated; exact products", isolated.len());
        return compute_posteriors(x, t_y, params, false);
    }

    let kt1 = gauss_transform(t_y, x, &DMatrix::from_element(m, 1, 1.0), sigma2, plan)?;
    let ln_norm = ((1.0 - params.w) / m as f64).ln() - 0.5 * d as f64 * (2.0 * std::f64::consts::PI * sigma2).ln();
    let mut a = vec![0.0; n];
    let mut pt1 = vec![0.0; n];
    let mut nll = Neumaier::default();
    let mut empty = 0usize;
    let mut is_isolated = vec![false; n];
    isolated.iter().for_each(|&j| is_isolated[j] = true);
    for j in 0..n {
        if is_isolated[j] {
            // Summed exactly below; `a = 0` keeps it out of the fast products.
            continue;
        }
        // Expansion error can push a tiny sum slightly negative.
        let s = kt1[(j, 0)].max(0.0);
        let denom = s + c;
        if denom > 0.0 {
            a[j] = 1.0 / denom;
            pt1[j] = s / denom;
            nll.add(-(ln_norm + denom.ln()));
        } else {
            empty += 1;
            nll.add(f64::INFINITY);
        }
    }
    if empty > 0 {
        log::warn!("{empty} data points have no kernel mass within the evaluation cutoff; their posteriors are zero");
    }

    let xm = x.matrix();
    let a = a.as_slice();
    let (mut p1, mut px, mut p_sqdist) = if plan.mode == GaussMode::Truncated {
        truncated::posterior_moments(x, t_y, a, sigma2, &plan.params)
    } else {
        // Columns: a, a x, a |x|^2.
        let mut wts = DMatrix::zeros(n, d + 2);
        for j in 0..n {
            wts[(j, 0)] = a[j];
            let mut r2 = 0.0;
            for k in 0..d {
                wts[(j, 1 + k)] = a[j] * xm[(j, k)];
                r2 += xm[(j, k)] * xm[(j, k)];
            }
            wts[(j, d + 1)] = a[j] * r2;
        }
        let g = gauss_transform(x, t_y, &wts, sigma2, plan)?;
        let tm = t_y.matrix();
        let mut p1 = vec![0.0; m];
        let mut px = DMatrix::zeros(m, d);
        let mut p_sqdist = vec![0.0; m];
        for i in 0..m {
            p1[i] = g[(i, 0)];
            let mut cross = 0.0;
            let mut t2 = 0.0;
            for k in 0..d {
                px[(i, k)] = g[(i, 1 + k)];
                cross += g[(i, 1 + k)] * tm[(i, k)];
                t2 += tm[(i, k)] * tm[(i, k)];
            }
            p_sqdist[i] = (g[(i, d + 1)] - 2.0 * cross + t2 * p1[i]).max(0.0);
        }
        (p1, px, p_sqdist)
    };
    if !isolated.is_empty() {
        let xs = x.to_row_major();
        let ts = t_y.to_row_major();
        let ln_c = if c > 0.0 { c.ln() } else { f64::NEG_INFINITY };
        let mut col = Column::new(m);
        for &j in &isolated {
            let xj = &xs[j * d..(j + 1) * d];
            let (aj, col_pt1, col_nll) = col.evaluate(xj, &ts, 0.5 / sigma2, ln_c);
            nll.add(col_nll - ln_norm);
            pt1[j] = col_pt1;
            for i in 0..m {
                let p = col.e[i] * aj;
                p1[i] += p;
                for k in 0..d {
                    px[(i, k)] += p * xj[k];
                }
                p_sqdist[i] += p * col.d2[i];
            }
        }
    }
    if !isolated.is_empty() {
        log::debug!("{} isolated data points summed exactly", isolated.len());
    }

    let np = pt1.iter().sum();
    Ok(PosteriorStats {
        p1,
        pt1,
        px,
        np,
        p_sqdist,
        t_ref: t_y.matrix().clone(),
        nll: nll.value(),
        dense_p: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ps(rows: &[&[f64]]) -> PointSet {
        PointSet::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn single_gaussian() {
        let s = ps(&[&[0.0, 0.0]]);
        let t = ps(&[&[1.0, 1.0]]);
        for plan in [GaussTransformPlan::exact(), GaussTransformPlan::fgt(), GaussTransformPlan::truncated()] {
            let out = gauss_transform(&s, &t, &DMatrix::from_element(1, 1, 1.0), 0.5, &plan).unwrap();
            assert!((out[(0, 0)] - (-2.0f64).exp()).abs() < 1e-9, "{:?}", plan.mode);
        }
    }

    #[test]
    fn zero_weights() {
        let s = ps(&[&[0.0], &[1.0], &[3.0]]);
        let out = gauss_transform(&s, &s, &DMatrix::zeros(3, 2), 1.0, &GaussTransformPlan::fgt()).unwrap();
        assert!(out.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn switch_threshold() {
        let plan = GaussTransformPlan::fgt();
        assert_eq!(truncation_switch(1e6, 1.0, &plan), GaussMode::Fgt);
        assert_eq!(truncation_switch(1e-6 * 0.999, 1.0, &plan), GaussMode::Truncated);
    }

    #[test]
    fn rejects_bad_params() {
        let p = FgtParams { epsilon: 0.0, ..FgtParams::default() };
        assert!(p.validate().is_err());
        let p = FgtParams { order: 0, ..FgtParams::default() };
        assert!(p.validate().is_err());
    }
}
