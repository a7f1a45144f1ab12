//! Registration results and per-iteration diagnostics.

use serde::{Deserialize, Serialize};

use crate::config::RegistrationConfig;
use crate::pointset::PointSet;
use crate::transform::Transform;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Rigid,
    Affine,
    Nonrigid,
    Icp,
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Method::Rigid => "rigid",
            Method::Affine => "affine",
            Method::Nonrigid => "nonrigid",
            Method::Icp => "icp",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for Method {
    type Err = crate::error::RegError;

    fn from_str(s: &str) -> crate::error::Result<Self> {
        match s {
            "rigid" => Ok(Method::Rigid),
            "affine" => Ok(Method::Affine),
            "nonrigid" => Ok(Method::Nonrigid),
            "icp" => Ok(Method::Icp),
            other => Err(crate::error::RegError::InvalidParameter(format!("unknown method '{other}'"))),
        }
    }
}

/// Non-fatal conditions met during a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Warning {
    /// Reflection removed while the two smallest singular values coincide.
    DegenerateRotation,
    NegativeScale,
    /// All model mass sits at one point; scale fixed to 1.
    ZeroModelSpread,
    /// Model covariance singular; solved with a small ridge.
    SingularAffine,
    /// Initial variance was zero and has been clamped to the floor.
    CoincidentSets,
    /// A point set has zero spread; normalized with unit scale.
    ZeroVariance { set: String },
    /// A larger-than-dense model used the low-rank solve with this rank.
    LowRankDefault { rank: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WarningEvent {
    /// Iteration the warning was raised in; `None` for setup.
    pub iteration: Option<usize>,
    pub warning: Warning,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    /// Variance used by this iteration's E-step.
    pub sigma2: f64,
    /// Variance after the M-step.
    pub sigma2_new: f64,
    /// Negative log-likelihood at the E-step parameters; `None` if infinite.
    pub nll: Option<f64>,
    /// Objective with this iteration's posteriors, before and after the M-step.
    pub q_before: Option<f64>,
    pub q_after: Option<f64>,
    /// Same objective evaluated from a materialized posterior matrix.
    pub q_dense: Option<f64>,
    /// Root-mean-square movement of the transformed model points.
    pub change: f64,
    pub np: f64,
    /// Evaluator used by the E-step: exact, fgt or truncated.
    pub estep: String,
    pub elapsed_secs: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EmDiagnostics {
    pub iterations: Vec<IterationRecord>,
    pub warnings: Vec<WarningEvent>,
}

impl EmDiagnostics {
    pub fn warn(&mut self, iteration: Option<usize>, warning: Warning) {
        log::warn!("{warning:?} (iteration {iteration:?})");
        self.warnings.push(WarningEvent { iteration, warning });
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrespondenceSummary {
    /// For each data point, the model point with the largest posterior.
    pub assignment: Vec<usize>,
    /// Posterior mass explained by the Gaussian components.
    pub np: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub rotation_error: Option<f64>,
    pub scale_error: Option<f64>,
    /// Mean squared distance between true and recovered corresponding points.
    pub correspondence_mse: Option<f64>,
    /// `correspondence_mse` divided by the data variance.
    pub normalized_mse: Option<f64>,
    /// Fraction of surviving true pairs recovered by the hard assignment.
    pub correct_fraction: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub total_secs: f64,
    pub estep_secs: f64,
    pub mstep_secs: f64,
    pub setup_secs: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Tolerance,
    SigmaFloor,
    MaxIterations,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegistrationReport {
    pub method: Method,
    pub config: RegistrationConfig,
    /// Recovered map from model to data, in the input coordinates.
    pub transform: Transform,
    pub converged: bool,
    pub stop_reason: StopReason,
    pub iterations: usize,
    /// Final variance, in normalized units when normalization is on.
    pub sigma2: f64,
    /// Negative log-likelihood at the final parameters.
    pub final_nll: Option<f64>,
    pub correspondence: CorrespondenceSummary,
    /// Transformed model points in the input coordinates.
    pub aligned: PointSet,
    pub diagnostics: EmDiagnostics,
    pub metrics: Option<Metrics>,
    pub timings: Timings,
}

impl RegistrationReport {
    /// Copy with all wall-clock measurements zeroed, for comparing runs.
    pub fn without_timings(&self) -> Self {
        let mut r = self.clone();
        r.timings = Timings::default();
        for it in r.diagnostics.iterations.iter_mut() {
            it.elapsed_secs = 0.0;
        }
        r
    }

    pub fn to_json(&self) -> crate::error::Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> crate::error::Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

pub(crate) fn finite(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}
