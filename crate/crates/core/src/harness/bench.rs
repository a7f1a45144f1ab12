//! Seeded benchmark sweeps over one degradation axis.
//!
//! Every cell runs `trials` problems with seeds `base.seed + trial`, shared
//! by all methods and all cells so comparisons are paired.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::icp::icp_baseline;
use super::io::load_pointset;
use super::metrics::evaluate;
use super::shapes::{bunny, bunny_with, fish};
use super::synth::{synth_pair, DegradationSpec, TransformKind};
use crate::config::RegistrationConfig;
use crate::error::{RegError, Result};
use crate::nonrigid::register_nonrigid;
use crate::pointset::PointSet;
use crate::report::{Method, RegistrationReport};
use crate::rigid::{register_affine, register_rigid};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Fish,
    Bunny,
    /// Surface cloud with the given number of points.
    BunnySized(usize),
    File(String),
}

impl Shape {
    pub fn load(&self) -> Result<PointSet> {
        match self {
            Shape::Fish => Ok(fish()),
            Shape::Bunny => Ok(bunny()),
            Shape::BunnySized(n) => Ok(bunny_with(*n, 0)),
            Shape::File(p) => load_pointset(p),
        }
    }
}

/// The degradation parameter varied across cells.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    Noise,
    Deform,
    /// Absolute outlier count.
    Outliers,
    /// Outliers as a fraction of the base point count.
    OutlierRatio,
    Rotation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchGrid {
    pub shape: Shape,
    pub kind: TransformKind,
    #[serde(default)]
    pub base: DegradationSpec,
    pub axis: Axis,
    pub values: Vec<f64>,
    #[serde(default)]
    pub config: RegistrationConfig,
}

impl BenchGrid {
    pub fn spec_at(&self, value: f64, trial: usize, base_count: usize) -> DegradationSpec {
        let mut s = self.base.clone();
        s.seed = self.base.seed + trial as u64;
        match self.axis {
            Axis::Noise => s.noise = value,
            Axis::Deform => s.deform = value,
            Axis::Outliers => s.outliers = value.round().max(0.0) as usize,
            Axis::OutlierRatio => s.outliers = (value * base_count as f64).round().max(0.0) as usize,
            Axis::Rotation => s.rotation_deg = Some(value),
        }
        s
    }
}

pub fn run_method(method: Method, x: &PointSet, y: &PointSet, config: &RegistrationConfig) -> Result<RegistrationReport> {
    match method {
        Method::Rigid => register_rigid(x, y, config),
        Method::Affine => register_affine(x, y, config),
        Method::Nonrigid => register_nonrigid(x, y, config),
        Method::Icp => icp_baseline(x, y, config),
    }
}

/// Whether the recorded negative log-likelihood never rises by more than
/// `rel_tol` relative between consecutive iterations.
pub fn nll_monotone(report: &RegistrationReport, rel_tol: f64) -> bool {
    let vals: Vec<f64> = report.diagnostics.iterations.iter().filter_map(|r| r.nll).collect();
    let mut seq = vals;
    if let Some(f) = report.final_nll {
        seq.push(f);
    }
    seq.windows(2).all(|w| w[1] <= w[0] + rel_tol * w[0].abs().max(1.0))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub count: usize,
    pub mean: Option<f64>,
    pub std: Option<f64>,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self::default();
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        Self { count: n, mean: Some(mean), std: Some(var.sqrt()) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub seed: u64,
    pub rotation_error: Option<f64>,
    pub normalized_mse: Option<f64>,
    pub correct_fraction: Option<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// `None` for methods without a likelihood.
    pub nll_monotone: Option<bool>,
    pub secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub value: f64,
    pub method: Method,
    pub trials: Vec<TrialResult>,
    pub failures: Vec<String>,
    pub rotation_error: Summary,
    pub normalized_mse: Summary,
    pub correct_fraction: Summary,
    pub monotonicity_violations: usize,
}

impl CellResult {
    /// The headline metric: rotation error for rigid problems, normalized
    /// correspondence error otherwise.
    pub fn primary(&self, kind: TransformKind) -> &Summary {
        if kind == TransformKind::Rigid {
            &self.rotation_error
        } else {
            &self.normalized_mse
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub grid: BenchGrid,
    pub methods: Vec<Method>,
    pub trials: usize,
    pub cells: Vec<CellResult>,
}

impl BenchmarkReport {
    pub fn cell(&self, value: f64, method: Method) -> Option<&CellResult> {
        self.cells.iter().find(|c| c.value == value && c.method == method)
    }

    /// One row per cell and method.
    pub fn table(&self) -> String {
        let mut out = String::from(
            "axis_value\tmethod\ttrials\tfailures\trotation_error_mean\trotation_error_std\tnormalized_mse_mean\tnormalized_mse_std\tcorrect_fraction_mean\tnll_violations\n",
        );
        let f = |v: Option<f64>| v.map_or("nan".to_string(), |x| format!("{x:.6e}"));
        for c in &self.cells {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                c.value,
                c.method,
                c.trials.len(),
                c.failures.len(),
                f(c.rotation_error.mean),
                f(c.rotation_error.std),
                f(c.normalized_mse.mean),
                f(c.normalized_mse.std),
                f(c.correct_fraction.mean),
                c.monotonicity_violations
            );
        }
        out
    }

    /// Plot data: one line per method, the headline metric mean and std at every axis value.
    pub fn series(&self) -> String {
        let mut out = String::from("method\taxis_value\tmean\tstd\n");
        for m in &self.methods {
            for c in self.cells.iter().filter(|c| c.method == *m) {
                let s = c.primary(self.grid.kind);
                let _ = writeln!(
                    out,
                    "{}\t{}\t{}\t{}",
                    m,
                    c.value,
                    s.mean.map_or("nan".into(), |v| format!("{v:.6e}")),
                    s.std.map_or("nan".into(), |v| format!("{v:.6e}"))
                );
            }
        }
        out
    }

    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("report.json"), serde_json::to_string_pretty(self)?)?;
        std::fs::write(dir.join("table.tsv"), self.table())?;
        std::fs::write(dir.join("series.tsv"), self.series())?;
        Ok(())
    }
}

pub fn run_benchmark(grid: &BenchGrid, methods: &[Method], trials: usize) -> Result<BenchmarkReport> {
    if trials == 0 {
        return Err(RegError::InvalidParameter("trials must be at least 1".into()));
    }
    if methods.is_empty() {
        return Err(RegError::InvalidParameter("no methods given".into()));
    }
    grid.config.validate()?;
    let base = grid.shape.load()?;
    let mut cells = Vec::new();
    for &value in &grid.values {
        let mut per_method: Vec<CellResult> = methods
            .iter()
            .map(|&method| CellResult {
                value,
                method,
                trials: Vec::new(),
                failures: Vec::new(),
                rotation_error: Summary::default(),
                normalized_mse: Summary::default(),
                correct_fraction: Summary::default(),
                monotonicity_violations: 0,
            })
            .collect();
        for trial in 0..trials {
            let spec = grid.spec_at(value, trial, base.count());
            let pair = match synth_pair(&spec, &base, grid.kind) {
                Ok(p) => p,
                Err(e) => {
                    per_method.iter_mut().for_each(|c| c.failures.push(format!("seed {}: {e}", spec.seed)));
                    continue;
                }
            };
            for cell in per_method.iter_mut() {
                let t0 = Instant::now();
                let outcome = run_method(cell.method, &pair.x, &pair.y, &grid.config)
                    .and_then(|r| evaluate(&r, &pair.truth).map(|m| (r, m)));
                match outcome {
                    Ok((report, metrics)) => {
                        let monotone = (cell.method != Method::Icp).then(|| nll_monotone(&report, 1e-9));
                        if monotone == Some(false) {
                            cell.monotonicity_violations += 1;
                        }
                        cell.trials.push(TrialResult {
                            seed: spec.seed,
                            rotation_error: metrics.rotation_error,
                            normalized_mse: metrics.normalized_mse,
                            correct_fraction: metrics.correct_fraction,
                            iterations: report.iterations,
                            converged: report.converged,
                            nll_monotone: monotone,
                            secs: t0.elapsed().as_secs_f64(),
                        });
                    }
                    Err(e) => cell.failures.push(format!("seed {}: {e}", spec.seed)),
                }
            }
        }
        for cell in per_method.iter_mut() {
            let collect = |f: fn(&TrialResult) -> Option<f64>| cell.trials.iter().filter_map(f).collect::<Vec<_>>();
            cell.rotation_error = Summary::of(&collect(|t| t.rotation_error));
            cell.normalized_mse = Summary::of(&collect(|t| t.normalized_mse));
            cell.correct_fraction = Summary::of(&collect(|t| t.correct_fraction));
        }
        cells.extend(per_method);
    }
    Ok(BenchmarkReport { grid: grid.clone(), methods: methods.to_vec(), trials, cells })
}
