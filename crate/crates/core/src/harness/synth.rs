//! Seeded synthetic registration problems.
//!
//! The model `Y` is the base shape (possibly with regions removed). The data
//! `X` is the base moved by the true transform, then perturbed with noise,
//! cropped, padded with outliers and shuffled. All standard deviations are
//! relative to the overall spread of the base shape.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::normalize::spread;
use crate::error::{RegError, Result};
use crate::pointset::PointSet;
use crate::rigid::{AffineTransform, RigidTransform};
use crate::transform::Transform;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransformKind {
    Rigid,
    Affine,
    Nonrigid,
}

impl std::str::FromStr for TransformKind {
    type Err = RegError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rigid" => Ok(Self::Rigid),
            "affine" => Ok(Self::Affine),
            "nonrigid" => Ok(Self::Nonrigid),
            other => Err(RegError::InvalidParameter(format!("unknown transform kind '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SetRole {
    X,
    Y,
}

/// Removes the points of one set whose coordinate along `axis` lies in
/// `[lo, hi]`, given as fractions of that set's bounding box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MissingRegion {
    pub set: SetRole,
    pub axis: usize,
    pub lo: f64,
    pub hi: f64,
}

impl std::str::FromStr for MissingRegion {
    type Err = RegError;

    /// `SET:AXIS:LO:HI`, e.g. `x:0:0.0:0.3`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || RegError::InvalidParameter(format!("missing region '{s}' is not SET:AXIS:LO:HI"));
        let parts: Vec<&str> = s.split(':').collect();
        if parts.len() != 4 {
            return Err(bad());
        }
        let set = match parts[0] {
            "x" | "X" => SetRole::X,
            "y" | "Y" => SetRole::Y,
            _ => return Err(bad()),
        };
        let axis = parts[1].parse().map_err(|_| bad())?;
        let lo: f64 = parts[2].parse().map_err(|_| bad())?;
        let hi: f64 = parts[3].parse().map_err(|_| bad())?;
        if !(lo <= hi) {
            return Err(bad());
        }
        Ok(Self { set, axis, lo, hi })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DegradationSpec {
    /// Std of the control-grid displacements (non-rigid warp).
    pub deform: f64,
    /// Std of the isotropic noise added to the data.
    pub noise: f64,
    /// Number of outliers appended to the data.
    pub outliers: usize,
    /// Std of the outlier distribution around the data centroid.
    pub outlier_std: f64,
    pub missing: Vec<MissingRegion>,
    /// Rotation angle in degrees; `None` means 50 for rigid and affine, 0 for non-rigid.
    pub rotation_deg: Option<f64>,
    /// Scale for rigid pairs.
    pub scale: f64,
    /// Std of the perturbation `B = R (I + E)` for affine pairs.
    pub affine: f64,
    /// Std of the translation.
    pub translation: f64,
    pub seed: u64,
}

impl Default for DegradationSpec {
    fn default() -> Self {
        Self {
            deform: 0.0,
            noise: 0.0,
            outliers: 0,
            outlier_std: 1.0,
            missing: Vec::new(),
            rotation_deg: None,
            scale: 1.0,
            affine: 0.3,
            translation: 0.5,
            seed: 0,
        }
    }
}

impl DegradationSpec {
    pub fn validate(&self) -> Result<()> {
        let nonneg = [self.deform, self.noise, self.outlier_std, self.affine, self.translation];
        if nonneg.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(RegError::InvalidParameter("degradation levels must be finite and non-negative".into()));
        }
        if !(self.scale > 0.0) {
            return Err(RegError::InvalidParameter("scale must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub kind: TransformKind,
    /// The applied map for rigid and affine pairs.
    pub transform: Option<Transform>,
    /// Surviving correspondences `(model index, data index)`.
    pub pairs: Vec<(usize, usize)>,
    /// True image of every model point, one row per model point.
    pub x_clean: PointSet,
    /// Overall spread of the data set, used to report errors in normalized units.
    pub x_spread: f64,
    pub spec: DegradationSpec,
}

#[derive(Debug, Clone)]
pub struct SynthPair {
    pub x: PointSet,
    pub y: PointSet,
    pub truth: GroundTruth,
}

/// Uniformly random rotation of the given angle: about a random axis in 3-D,
/// with random sign in 2-D.
pub fn random_rotation(dim: usize, angle_rad: f64, rng: &mut impl Rng) -> DMatrix<f64> {
    match dim {
        1 => DMatrix::identity(1, 1),
        2 => {
            let a = if rng.random::<bool>() { angle_rad } else { -angle_rad };
            DMatrix::from_row_slice(2, 2, &[a.cos(), -a.sin(), a.sin(), a.cos()])
        }
        3 => {
            let mut axis = DVector::from_fn(3, |_, _| StandardNormal.sample(rng));
            while axis.norm() < 1e-9 {
                axis = DVector::from_fn(3, |_, _| StandardNormal.sample(rng));
            }
            let u = nalgebra::Unit::new_normalize(nalgebra::Vector3::new(axis[0], axis[1], axis[2]));
            let r = nalgebra::Rotation3::from_axis_angle(&u, angle_rad);
            DMatrix::from_fn(3, 3, |i, j| r[(i, j)])
        }
        d => {
            // Rotation by the angle in a random plane.
            let q = DMatrix::from_fn(d, d, |_, _| Distribution::<f64>::sample(&StandardNormal, rng)).qr().q();
            let mut g = DMatrix::identity(d, d);
            g[(0, 0)] = angle_rad.cos();
            g[(0, 1)] = -angle_rad.sin();
            g[(1, 0)] = angle_rad.sin();
            g[(1, 1)] = angle_rad.cos();
            &q * g * q.transpose()
        }
    }
}

/// Haar-distributed rotation of any dimension.
pub fn uniform_rotation(dim: usize, rng: &mut impl Rng) -> DMatrix<f64> {
    let a = DMatrix::from_fn(dim, dim, |_, _| StandardNormal.sample(rng));
    let qr = a.qr();
    let (mut q, r) = (qr.q(), qr.r());
    for j in 0..dim {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    if q.determinant() < 0.0 {
        q.column_mut(0).neg_mut();
    }
    q
}

/// Smooth random warp: Gaussian displacements at a control grid (4 nodes
/// per axis in 2-D, 3 in 3-D) spanning the bounding box, interpolated by
/// Gaussian radial basis functions whose width is the grid spacing.
pub struct ControlGridWarp {
    nodes: DMatrix<f64>,
    widths: Vec<f64>,
    coef: DMatrix<f64>,
}

impl ControlGridWarp {
    pub fn random(base: &PointSet, std: f64, rng: &mut impl Rng) -> Result<Self> {
        let d = base.dim();
        let per_axis: usize = if d <= 2 { 4 } else { 3 };
        let lo: Vec<f64> = (0..d).map(|k| base.matrix().column(k).min()).collect();
        let hi: Vec<f64> = (0..d).map(|k| base.matrix().column(k).max()).collect();
        let widths: Vec<f64> = (0..d).map(|k| ((hi[k] - lo[k]) / (per_axis - 1) as f64).max(1e-12)).collect();
        let count = per_axis.pow(d as u32);
        let nodes = DMatrix::from_fn(count, d, |i, k| {
            let idx = (i / per_axis.pow(k as u32)) % per_axis;
            lo[k] + widths[k] * idx as f64
        });
        let normal = Normal::new(0.0, std).map_err(|e| RegError::InvalidParameter(e.to_string()))?;
        let disp = DMatrix::from_fn(count, d, |_, _| normal.sample(rng));
        let mut phi = DMatrix::zeros(count, count);
        for i in 0..count {
            for j in 0..count {
                phi[(i, j)] = rbf(&nodes, i, nodes.row(j).iter().copied(), &widths);
            }
        }
        let coef = phi
            .lu()
            .solve(&disp)
            .ok_or_else(|| RegError::InvalidParameter("control grid interpolation is singular".into()))?;
        Ok(Self { nodes, widths, coef })
    }

    pub fn displacement(&self, p: &PointSet) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(p.count(), p.dim());
        for i in 0..p.count() {
            for j in 0..self.nodes.nrows() {
                let g = rbf(&self.nodes, j, p.matrix().row(i).iter().copied(), &self.widths);
                for k in 0..p.dim() {
                    out[(i, k)] += g * self.coef[(j, k)];
                }
            }
        }
        out
    }
}

fn rbf(nodes: &DMatrix<f64>, j: usize, p: impl Iterator<Item = f64>, widths: &[f64]) -> f64 {
    let r2: f64 = p.enumerate().map(|(k, v)| ((v - nodes[(j, k)]) / widths[k]).powi(2)).sum();
    (-0.5 * r2).exp()
}

fn keep_mask(p: &PointSet, regions: &[&MissingRegion]) -> Result<Vec<bool>> {
    let mut keep = vec![true; p.count()];
    for r in regions {
        if r.axis >= p.dim() {
            return Err(RegError::InvalidParameter(format!("missing-region axis {} out of range", r.axis)));
        }
        let col = p.matrix().column(r.axis);
        let (lo, hi) = (col.min(), col.max());
        let width = hi - lo;
        for (i, v) in col.iter().enumerate() {
            let f = if width > 0.0 { (v - lo) / width } else { 0.0 };
            if f >= r.lo && f <= r.hi {
                keep[i] = false;
            }
        }
    }
    Ok(keep)
}

/// Builds a registration problem from `base`. Deterministic in `spec.seed`.
pub fn synth_pair(spec: &DegradationSpec, base: &PointSet, kind: TransformKind) -> Result<SynthPair> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let d = base.dim();
    let scale = {
        let s = spread(base);
        if s > 0.0 { s } else { 1.0 }
    };
    let angle = spec
        .rotation_deg
        .unwrap_or(if kind == TransformKind::Nonrigid { 0.0 } else { 50.0 })
        .to_radians();
    let rot = random_rotation(d, angle, &mut rng);
    let shift = DVector::from_fn(d, |_, _| StandardNormal.sample(&mut rng)) * (spec.translation * scale);

    let (transform, x_clean) = match kind {
        TransformKind::Rigid => {
            let t = RigidTransform { r: rot, s: spec.scale, t: shift };
            let x = t.apply(base)?;
            (Some(Transform::Rigid(t)), x)
        }
        TransformKind::Affine => {
            let b = loop {
                let e = DMatrix::from_fn(d, d, |_, _| spec.affine * Distribution::<f64>::sample(&StandardNormal, &mut rng));
                let b = &rot * (DMatrix::identity(d, d) + e);
                if b.determinant() > 0.0 {
                    break b;
                }
            };
            let t = AffineTransform { b, t: shift };
            let x = t.apply(base)?;
            (Some(Transform::Affine(t)), x)
        }
        TransformKind::Nonrigid => {
            let moved = if spec.deform > 0.0 {
                let warp = ControlGridWarp::random(base, spec.deform * scale, &mut rng)?;
                PointSet::new(base.matrix() + warp.displacement(base))?
            } else {
                base.clone()
            };
            let t = RigidTransform { r: rot, s: 1.0, t: shift };
            let x = if angle != 0.0 || spec.translation > 0.0 { t.apply(&moved)? } else { moved };
            (None, x)
        }
    };

    let mut x = x_clean.matrix().clone();
    if spec.noise > 0.0 {
        let normal = Normal::new(0.0, spec.noise * scale).map_err(|e| RegError::InvalidParameter(e.to_string()))?;
        x.iter_mut().for_each(|v| *v += normal.sample(&mut rng));
    }
    let x_noisy = PointSet::new(x)?;

    let x_regions: Vec<&MissingRegion> = spec.missing.iter().filter(|r| r.set == SetRole::X).collect();
    let y_regions: Vec<&MissingRegion> = spec.missing.iter().filter(|r| r.set == SetRole::Y).collect();
    let keep_x = keep_mask(&x_noisy, &x_regions)?;
    let keep_y = keep_mask(base, &y_regions)?;
    let x_idx: Vec<usize> = (0..x_noisy.count()).filter(|&i| keep_x[i]).collect();
    let y_idx: Vec<usize> = (0..base.count()).filter(|&i| keep_y[i]).collect();
    if x_idx.is_empty() {
        return Err(RegError::EmptyAfterRemoval { set: "x".into() });
    }
    if y_idx.is_empty() {
        return Err(RegError::EmptyAfterRemoval { set: "y".into() });
    }
    let y = base.select(&y_idx)?;
    let x_clean = x_clean.select(&y_idx)?;
    let mut x_rows = x_noisy.select(&x_idx)?;

    // Original base index of each kept data point, None for outliers.
    let mut origin: Vec<Option<usize>> = x_idx.iter().map(|&i| Some(i)).collect();
    if spec.outliers > 0 {
        let c = x_rows.centroid();
        let normal =
            Normal::new(0.0, spec.outlier_std * scale).map_err(|e| RegError::InvalidParameter(e.to_string()))?;
        let out = DMatrix::from_fn(spec.outliers, d, |_, k| c[k] + normal.sample(&mut rng));
        x_rows = x_rows.concat(&PointSet::new(out)?)?;
        origin.extend(std::iter::repeat(None).take(spec.outliers));
    }
    let mut perm: Vec<usize> = (0..x_rows.count()).collect();
    perm.shuffle(&mut rng);
    let x = x_rows.select(&perm)?;

    let y_pos: std::collections::HashMap<usize, usize> = y_idx.iter().enumerate().map(|(m, &b)| (b, m)).collect();
    let mut pairs: Vec<(usize, usize)> = perm
        .iter()
        .enumerate()
        .filter_map(|(n, &src)| origin[src].and_then(|b| y_pos.get(&b).map(|&m| (m, n))))
        .collect();
    pairs.sort_unstable();

    let x_spread = spread(&x);
    Ok(SynthPair {
        x,
        y,
        truth: GroundTruth { kind, transform, pairs, x_clean, x_spread, spec: spec.clone() },
    })
}
