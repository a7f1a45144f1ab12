//! Error measures against ground truth.

use nalgebra::DMatrix;

use super::synth::GroundTruth;
use crate::error::{RegError, Result};
use crate::pointset::{row_dist2, PointSet};
use crate::report::{Metrics, RegistrationReport};
use crate::transform::Transform;

/// `|R_true - R_est|_F`.
pub fn rotation_error(r_true: &DMatrix<f64>, r_est: &DMatrix<f64>) -> Result<f64> {
    if r_true.shape() != r_est.shape() {
        return Err(RegError::DimensionMismatch { expected: r_true.nrows(), got: r_est.nrows() });
    }
    Ok((r_true - r_est).norm())
}

/// Mean squared distance between paired rows.
pub fn correspondence_mse(x_true_corr: &PointSet, t_y: &PointSet) -> Result<f64> {
    x_true_corr.check_dim(t_y)?;
    if x_true_corr.count() != t_y.count() {
        return Err(RegError::CountMismatch { expected: x_true_corr.count(), got: t_y.count() });
    }
    let (a, b) = (x_true_corr.matrix(), t_y.matrix());
    let total: f64 = (0..a.nrows()).map(|i| row_dist2(a, i, b, i)).sum();
    Ok(total / a.nrows() as f64)
}

/// Metrics of a finished registration against the generator's ground truth.
pub fn evaluate(report: &RegistrationReport, truth: &GroundTruth) -> Result<Metrics> {
    let mut m = Metrics::default();
    if let (Some(Transform::Rigid(t)), Transform::Rigid(est)) = (&truth.transform, &report.transform) {
        m.rotation_error = Some(rotation_error(&t.r, &est.r)?);
        m.scale_error = Some((est.s - t.s).abs() / t.s);
    }
    if report.aligned.count() != truth.x_clean.count() {
        return Err(RegError::CountMismatch { expected: truth.x_clean.count(), got: report.aligned.count() });
    }
    let model_idx: Vec<usize> = truth.pairs.iter().map(|p| p.0).collect();
    if !model_idx.is_empty() {
        let mut uniq = model_idx.clone();
        uniq.dedup();
        let mse = correspondence_mse(&truth.x_clean.select(&uniq)?, &report.aligned.select(&uniq)?)?;
        m.correspondence_mse = Some(mse);
        m.normalized_mse = Some(mse / (truth.x_spread * truth.x_spread));
        let assign = &report.correspondence.assignment;
        let hits = truth.pairs.iter().filter(|(mi, n)| assign.get(*n) == Some(mi)).count();
        m.correct_fraction = Some(hits as f64 / truth.pairs.len() as f64);
    }
    Ok(m)
}
