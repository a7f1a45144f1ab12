//! Nearest-neighbour ICP with a closed-form similarity step, used as a baseline.

use std::time::Instant;

use nalgebra::DMatrix;

use super::normalize::{normalize, NormalizationParams};
use crate::config::RegistrationConfig;
use crate::error::Result;
use crate::estep::{PosteriorStats, SIGMA2_FLOOR};
use crate::pointset::{row_dist2, PointSet};
use crate::report::{CorrespondenceSummary, EmDiagnostics, IterationRecord, Method, RegistrationReport, StopReason, Timings, Warning};
use crate::rigid::{rigid_mstep, RigidTransform};
use crate::transform::Transform;

fn nearest(from: &DMatrix<f64>, to: &DMatrix<f64>) -> Vec<(usize, f64)> {
    (0..from.nrows())
        .map(|i| {
            let mut best = (0, f64::INFINITY);
            for j in 0..to.nrows() {
                let d = row_dist2(from, i, to, j);
                if d < best.1 {
                    best = (j, d);
                }
            }
            best
        })
        .collect()
}

/// Hard-assignment statistics: every model point is matched to its nearest data point.
fn matched_stats(x: &DMatrix<f64>, t: &DMatrix<f64>, nn: &[(usize, f64)]) -> PosteriorStats {
    let (m, d) = t.shape();
    let mut pt1 = vec![0.0; x.nrows()];
    let mut px = DMatrix::zeros(m, d);
    for (i, &(j, _)) in nn.iter().enumerate() {
        pt1[j] += 1.0;
        px.row_mut(i).copy_from(&x.row(j));
    }
    PosteriorStats {
        p1: vec![1.0; m],
        pt1,
        px,
        np: m as f64,
        p_sqdist: nn.iter().map(|p| p.1).collect(),
        t_ref: t.clone(),
        nll: f64::NAN,
        dense_p: None,
    }
}

/// Iterative closest point from the identity. `sigma2` in the diagnostics is
/// the mean squared matching distance per coordinate.
pub fn icp_baseline(x: &PointSet, y: &PointSet, config: &RegistrationConfig) -> Result<RegistrationReport> {
    let start = Instant::now();
    config.validate()?;
    x.check_dim(y)?;
    let dim = x.dim();
    let mut diag = EmDiagnostics::default();
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
    let xm = xn.matrix();
    let mut transform = RigidTransform::identity(dim);
    let mut t = yn.matrix().clone();
    let mut prev = f64::INFINITY;
    let mut stop = StopReason::MaxIterations;
    let mut converged = false;
    let mut iterations = 0;
    let mut last_err = f64::INFINITY;
    for k in 0..config.max_iters {
        let it_start = Instant::now();
        let nn = nearest(&t, xm);
        let err = nn.iter().map(|p| p.1).sum::<f64>() / (t.nrows() * dim) as f64;
        let stats = matched_stats(xm, &t, &nn);
        let step = rigid_mstep(&stats, &xn, &yn, config.estimate_scale)?;
        for w in step.warnings {
            diag.warn(Some(k), w);
        }
        let t_new = step.transform.apply(&yn)?.into_matrix();
        let change = ((&t_new - &t).norm_squared() / t.nrows() as f64).sqrt();
        transform = step.transform;
        t = t_new;
        let sigma2 = err.max(SIGMA2_FLOOR);
        diag.iterations.push(IterationRecord {
            iteration: k,
            sigma2,
            sigma2_new: step.sigma2,
            nll: None,
            q_before: None,
            q_after: None,
            q_dense: None,
            change,
            np: t.nrows() as f64,
            estep: "nearest".into(),
            elapsed_secs: it_start.elapsed().as_secs_f64(),
        });
        iterations = k + 1;
        last_err = sigma2;
        if sigma2 <= SIGMA2_FLOOR {
            stop = StopReason::SigmaFloor;
            converged = true;
            break;
        }
        if prev.is_finite() && (prev - err).abs() <= config.tol * prev {
            stop = StopReason::Tolerance;
            converged = true;
            break;
        }
        prev = err;
    }

    let assignment = nearest(xm, &t).into_iter().map(|p| p.0).collect();
    let mut tr = Transform::Rigid(transform);
    if config.normalize {
        tr = tr.denormalize(&nx, &ny);
    }
    let aligned = nx.invert(&PointSet::new(t)?)?;
    Ok(RegistrationReport {
        method: Method::Icp,
        config: config.clone(),
        transform: tr,
        converged,
        stop_reason: stop,
        iterations,
        sigma2: last_err,
        final_nll: None,
        correspondence: CorrespondenceSummary { assignment, np: x.count() as f64 },
        aligned,
        diagnostics: diag,
        metrics: None,
        timings: Timings { total_secs: start.elapsed().as_secs_f64(), ..Timings::default() },
    })
}
