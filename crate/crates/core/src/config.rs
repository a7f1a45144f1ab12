//! Registration configuration shared by every driver.

use serde::{Deserialize, Serialize};

use crate::error::{RegError, Result};
use crate::fastops::FgtParams;

/// How the E-step products are evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Acceleration {
    /// Streaming `O(MN)` evaluation with the per-point underflow guard.
    Exact,
    /// Fast Gauss transform products.
    Fgt,
    /// Fast Gauss transform while the kernel is wide, truncated kernel once it is narrow.
    Auto,
}

impl std::str::FromStr for Acceleration {
    type Err = RegError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(Self::Exact),
            "fgt" => Ok(Self::Fgt),
            "auto" => Ok(Self::Auto),
            other => Err(RegError::InvalidParameter(format!("unknown acceleration mode '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RegistrationConfig {
    /// Weight of the uniform outlier component, `0 <= w < 1`.
    pub w: f64,
    /// Regularization trade-off for the non-rigid field.
    pub lambda: f64,
    /// Width of the Gaussian smoothing kernel for the non-rigid field.
    pub beta: f64,
    /// Relative change of sigma^2 below which EM stops.
    pub tol: f64,
    pub max_iters: usize,
    /// Estimate the similarity scale in rigid registration; `false` fixes `s = 1`.
    pub estimate_scale: bool,
    pub acceleration: Acceleration,
    /// Rank of the kernel approximation for the non-rigid solve; `None` picks
    /// a dense solve up to `dense_solve_limit` points.
    pub lowrank: Option<usize>,
    pub dense_solve_limit: usize,
    /// Coefficient/variance passes per non-rigid EM iteration.
    pub inner_iters: usize,
    /// Pre-normalize both sets to zero mean and unit variance.
    pub normalize: bool,
    /// Cross-check the objective against a materialized posterior matrix
    /// whenever `M * N <= 1e7`.
    pub dense_diagnostics: bool,
    pub fgt: FgtParams,
    /// Seed for randomized internals (eigensolver start blocks).
    pub seed: u64,
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        Self {
            w: 0.0,
            lambda: 2.0,
            beta: 2.0,
            tol: 1e-8,
            max_iters: 150,
            estimate_scale: true,
            acceleration: Acceleration::Exact,
            lowrank: None,
            dense_solve_limit: 3000,
            inner_iters: 1,
            normalize: true,
            dense_diagnostics: false,
            fgt: FgtParams::default(),
            seed: 0,
        }
    }
}

impl RegistrationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.w) {
            return Err(RegError::InvalidParameter(format!("w must lie in [0, 1), got {}", self.w)));
        }
        if !(self.lambda > 0.0) {
            return Err(RegError::InvalidParameter(format!("lambda must be positive, got {}", self.lambda)));
        }
        if !(self.beta > 0.0) {
            return Err(RegError::InvalidParameter(format!("beta must be positive, got {}", self.beta)));
        }
        if !(self.tol >= 0.0) {
            return Err(RegError::InvalidParameter("tol must be non-negative".into()));
        }
        if self.max_iters == 0 {
            return Err(RegError::InvalidParameter("max_iters must be at least 1".into()));
        }
        if self.inner_iters == 0 {
            return Err(RegError::InvalidParameter("inner_iters must be at least 1".into()));
        }
        if self.lowrank == Some(0) {
            return Err(RegError::InvalidParameter("lowrank rank must be at least 1".into()));
        }
        self.fgt.validate()
    }
}
