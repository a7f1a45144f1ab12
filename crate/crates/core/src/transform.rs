//! The recovered model-to-data map.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::harness::normalize::NormalizationParams;
use crate::nonrigid::NonRigidField;
use crate::pointset::PointSet;
use crate::rigid::{AffineTransform, RigidTransform};

/// A non-rigid field expressed in normalized coordinates, wrapped so that it
/// maps points given in input coordinates: normalize by `input`, displace by
/// `field`, then undo `output`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NonRigidMap {
    pub input: NormalizationParams,
    pub field: NonRigidField,
    pub output: NormalizationParams,
}

impl NonRigidMap {
    pub fn apply(&self, pts: &PointSet) -> Result<PointSet> {
        let z = self.input.apply(pts)?;
        let moved = self.field.transform_points(&z)?;
        self.output.invert(&moved)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Transform {
    Rigid(RigidTransform),
    Affine(AffineTransform),
    Nonrigid(NonRigidMap),
}

impl Transform {
    pub fn apply(&self, pts: &PointSet) -> Result<PointSet> {
        match self {
            Transform::Rigid(t) => t.apply(pts),
            Transform::Affine(t) => t.apply(pts),
            Transform::Nonrigid(t) => t.apply(pts),
        }
    }

    pub fn as_rigid(&self) -> Option<&RigidTransform> {
        match self {
            Transform::Rigid(t) => Some(t),
            _ => None,
        }
    }

    pub fn as_affine(&self) -> Option<&AffineTransform> {
        match self {
            Transform::Affine(t) => Some(t),
            _ => None,
        }
    }

    pub fn as_nonrigid(&self) -> Option<&NonRigidMap> {
        match self {
            Transform::Nonrigid(t) => Some(t),
            _ => None,
        }
    }

    /// Re-expresses a map estimated between normalized model (`ny`) and
    /// normalized data (`nx`) coordinates as a map between the raw sets.
    pub fn denormalize(&self, nx: &NormalizationParams, ny: &NormalizationParams) -> Transform {
        let ratio = nx.rho / ny.rho;
        match self {
            Transform::Rigid(t) => {
                let s = t.s * ratio;
                let tr = &t.t * nx.rho + &nx.mu - &t.r * &ny.mu * s;
                Transform::Rigid(RigidTransform { r: t.r.clone(), s, t: tr })
            }
            Transform::Affine(t) => {
                let b = &t.b * ratio;
                let tr = &t.t * nx.rho + &nx.mu - &b * &ny.mu;
                Transform::Affine(AffineTransform { b, t: tr })
            }
            Transform::Nonrigid(map) => Transform::Nonrigid(NonRigidMap {
                input: ny.then(&map.input),
                field: map.field.clone(),
                output: nx.then(&map.output),
            }),
        }
    }
}
