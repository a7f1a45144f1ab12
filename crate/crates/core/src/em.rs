//! EM loop shared by the rigid, affine and non-rigid drivers.

use std::time::Instant;

use nalgebra::DMatrix;

use crate::config::{Acceleration, RegistrationConfig};
use crate::error::{RegError, Result};
use crate::estep::{compute_posteriors, hard_assignments, init_sigma2, objective_q, MixtureParams, PosteriorStats, SIGMA2_FLOOR};
use crate::fastops::{posterior_products_fast, truncation_switch, GaussMode, GaussTransformPlan};
use crate::harness::normalize::{normalize, spread, NormalizationParams};
use crate::pointset::PointSet;
use crate::report::{
    finite, CorrespondenceSummary, EmDiagnostics, IterationRecord, Method, RegistrationReport, StopReason, Timings,
    Warning,
};
use crate::transform::Transform;

/// Largest `M * N` for which the dense posterior matrix is kept for diagnostics.
pub const DENSE_DIAGNOSTIC_LIMIT: usize = 10_000_000;

pub(crate) struct MStepOutcome {
    pub sigma2_new: f64,
    pub q_before: f64,
    pub q_after: f64,
    /// Regularization part of `q_after`, zero for the parametric models.
    pub penalty: f64,
    pub warnings: Vec<Warning>,
}

pub(crate) trait MStepModel {
    /// Current transformed model points.
    fn positions(&self) -> &DMatrix<f64>;
    fn m_step(&mut self, stats: &PosteriorStats, x: &PointSet, sigma2: f64) -> Result<MStepOutcome>;
}

/// E-step with the configured evaluator.
pub(crate) fn estep(
    x: &PointSet,
    t: &PointSet,
    params: &MixtureParams,
    config: &RegistrationConfig,
    data_scale: f64,
    want_dense: bool,
) -> Result<(PosteriorStats, GaussMode)> {
    let plan = GaussTransformPlan::new(GaussMode::Fgt, config.fgt.clone())?;
    let mode = match config.acceleration {
        Acceleration::Exact => GaussMode::Exact,
        Acceleration::Fgt => GaussMode::Fgt,
        Acceleration::Auto => truncation_switch(params.sigma2, data_scale, &plan),
    };
    let stats = match mode {
        GaussMode::Exact => compute_posteriors(x, t, params, want_dense)?,
        m => posterior_products_fast(x, t, params, &plan.with_mode(m))?,
    };
    Ok((stats, mode))
}

fn mode_name(m: GaussMode) -> &'static str {
    match m {
        GaussMode::Exact => "exact",
        GaussMode::Fgt => "fgt",
        GaussMode::Truncated => "truncated",
    }
}

pub(crate) fn run<M, F, G>(
    x: &PointSet,
    y: &PointSet,
    config: &RegistrationConfig,
    method: Method,
    make_model: F,
    extract: G,
) -> Result<RegistrationReport>
where
    M: MStepModel,
    F: FnOnce(&PointSet, PointSet, &mut EmDiagnostics) -> Result<M>,
    G: Fn(&M) -> Transform,
{
    let start = Instant::now();
    config.validate()?;
    x.check_dim(y)?;
    let mut diag = EmDiagnostics::default();
    let dim = x.dim();

    let (xn, nx, yn, ny) = if config.normalize {
        let (xn, nx, fx) = normalize(x)?;
        let (yn, ny, fy) = normalize(y)?;
        if fx {
            diag.warn(None, Warning::ZeroVariance { set: "data".into() });
        }
        if fy {
            diag.warn(None, Warning::ZeroVariance { set: "model".into() });
        }
        (xn, nx, yn, ny)
    } else {
        (x.clone(), NormalizationParams::identity(dim), y.clone(), NormalizationParams::identity(dim))
    };
    let data_scale = spread(&xn);
    let (m_count, n_count) = (yn.count(), xn.count());
    let want_dense = config.dense_diagnostics
        && config.acceleration == Acceleration::Exact
        && m_count.saturating_mul(n_count) <= DENSE_DIAGNOSTIC_LIMIT;

    let mut model = make_model(&xn, yn, &mut diag)?;
    let (mut sigma2, clamped) = init_sigma2(&xn, &PointSet::new(model.positions().clone())?)?;
    if clamped {
        diag.warn(None, Warning::CoincidentSets);
    }
    let mut timings = Timings { setup_secs: start.elapsed().as_secs_f64(), ..Timings::default() };

    let mut stop = StopReason::MaxIterations;
    let mut converged = false;
    let mut iterations = 0;
    for k in 0..config.max_iters {
        let it_start = Instant::now();
        let params = MixtureParams::new(sigma2, config.w)?;
        let t_old = PointSet::new(model.positions().clone())?;
        let (stats, mode) = estep(&xn, &t_old, &params, config, data_scale, want_dense)?;
        timings.estep_secs += it_start.elapsed().as_secs_f64();
        if !(stats.np > 1e-12 * n_count as f64) {
            return Err(RegError::CorrespondenceCollapse { np: stats.np });
        }

        let m_start = Instant::now();
        let out = model.m_step(&stats, &xn, sigma2)?;
        timings.mstep_secs += m_start.elapsed().as_secs_f64();
        for w in out.warnings {
            diag.warn(Some(k), w);
        }
        let t_new = model.positions();
        let change = ((t_new - t_old.matrix()).norm_squared() / m_count as f64).sqrt();
        let q_dense = if stats.dense_p.is_some() {
            let t_set = PointSet::new(t_new.clone())?;
            Some(objective_q(&stats, &xn, &t_set, out.sigma2_new)? + out.penalty)
        } else {
            None
        };
        let sigma2_new = out.sigma2_new.max(SIGMA2_FLOOR);
        diag.iterations.push(IterationRecord {
            iteration: k,
            sigma2,
            sigma2_new,
            nll: finite(stats.nll),
            q_before: finite(out.q_before),
            q_after: finite(out.q_after),
            q_dense,
            change,
            np: stats.np,
            estep: mode_name(mode).to_string(),
            elapsed_secs: it_start.elapsed().as_secs_f64(),
        });
        iterations = k + 1;

        let rel = (sigma2 - sigma2_new).abs() / sigma2;
        sigma2 = sigma2_new;
        if sigma2 <= SIGMA2_FLOOR {
            stop = StopReason::SigmaFloor;
            converged = true;
            break;
        }
        if rel < config.tol {
            stop = StopReason::Tolerance;
            converged = true;
            break;
        }
    }

    let t_final = PointSet::new(model.positions().clone())?;
    let params = MixtureParams::new(sigma2, config.w)?;
    let e_start = Instant::now();
    let (final_stats, _) = estep(&xn, &t_final, &params, config, data_scale, false)?;
    timings.estep_secs += e_start.elapsed().as_secs_f64();
    let assignment = hard_assignments(&xn, &t_final)?;

    let mut transform = extract(&model);
    if config.normalize {
        transform = transform.denormalize(&nx, &ny);
    }
    let aligned = nx.invert(&t_final)?;
    timings.total_secs = start.elapsed().as_secs_f64();

    Ok(RegistrationReport {
        method,
        config: config.clone(),
        transform,
        converged,
        stop_reason: stop,
        iterations,
        sigma2,
        final_nll: finite(final_stats.nll),
        correspondence: CorrespondenceSummary { assignment, np: final_stats.np },
        aligned,
        diagnostics: diag,
        metrics: None,
        timings,
    })
}
