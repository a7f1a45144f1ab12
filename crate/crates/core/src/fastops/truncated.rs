//! Gauss transform with the kernel set to zero beyond a cutoff radius.
//!
//! Sources are binned on a grid whose cell side equals the cutoff, so every
//! source within range of a target lies in the `3^D` cells around it.

use std::collections::HashMap;

use nalgebra::DMatrix;

use super::{row_major, FgtParams};
use crate::pointset::PointSet;

pub(super) struct Grid {
    dim: usize,
    cell: f64,
    bins: HashMap<Vec<i64>, Vec<usize>>,
    offsets: Vec<Vec<i64>>,
}

impl Grid {
    pub(super) fn new(points: &[f64], dim: usize, cell: f64) -> Self {
        let mut bins: HashMap<Vec<i64>, Vec<usize>> = HashMap::new();
        for (i, p) in points.chunks_exact(dim).enumerate() {
            bins.entry(key(p, cell)).or_default().push(i);
        }
        let mut offsets = vec![Vec::new()];
        for _ in 0..dim {
            offsets = offsets
                .into_iter()
                .flat_map(|o: Vec<i64>| {
                    (-1..=1).map(move |d| {
                        let mut o = o.clone();
                        o.push(d);
                        o
                    })
                })
                .collect();
        }
        Self { dim, cell, bins, offsets }
    }

    /// Whether some binned point lies within `radius <= cell` of `p`.
    pub(super) fn any_within(&self, points: &[f64], p: &[f64], radius: f64) -> bool {
        let r2 = radius * radius;
        let mut found = false;
        self.for_neighbors(p, |i| {
            if !found {
                let q = &points[i * self.dim..(i + 1) * self.dim];
                found = q.iter().zip(p).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() <= r2;
            }
        });
        found
    }

    /// Calls `f` with every binned index in the cells neighbouring `p`.
    fn for_neighbors(&self, p: &[f64], mut f: impl FnMut(usize)) {
        let base = key(p, self.cell);
        let mut k = vec![0i64; self.dim];
        for off in &self.offsets {
            for j in 0..self.dim {
                k[j] = base[j].saturating_add(off[j]);
            }
            if let Some(list) = self.bins.get(&k) {
                list.iter().for_each(|&i| f(i));
            }
        }
    }
}

fn key(p: &[f64], cell: f64) -> Vec<i64> {
    // Float-to-int casts saturate, so far-away points cannot wrap around.
    p.iter().map(|v| (v / cell).floor() as i64).collect()
}

pub(crate) fn transform(
    sources: &PointSet,
    targets: &PointSet,
    weights: &DMatrix<f64>,
    sigma2: f64,
    params: &FgtParams,
) -> DMatrix<f64> {
    let dim = sources.dim();
    let cols = weights.ncols();
    let radius = params.effective_truncation_radius() * sigma2.sqrt();
    let r2 = radius * radius;
    let src = sources.to_row_major();
    let tgt = targets.to_row_major();
    let w = row_major(weights);
    let grid = Grid::new(&src, dim, radius);
    let inv2s = 0.5 / sigma2;
    let mut out = vec![0.0; targets.count() * cols];
    for (m, y) in tgt.chunks_exact(dim).enumerate() {
        let acc = &mut out[m * cols..(m + 1) * cols];
        grid.for_neighbors(y, |n| {
            let x = &src[n * dim..(n + 1) * dim];
            let d2: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
            if d2 <= r2 {
                let g = (-d2 * inv2s).exp();
                for c in 0..cols {
                    acc[c] += g * w[n * cols + c];
                }
            }
        });
    }
    DMatrix::from_row_slice(targets.count(), cols, &out)
}

/// `P 1`, `P X` and `sum_n p_mn |x_n - t_m|^2` for `p_mn = K_mn a_n`, with
/// the squared distances accumulated directly rather than expanded.
pub(crate) fn posterior_moments(
    x: &PointSet,
    t_y: &PointSet,
    a: &[f64],
    sigma2: f64,
    params: &FgtParams,
) -> (Vec<f64>, DMatrix<f64>, Vec<f64>) {
    let dim = x.dim();
    let m = t_y.count();
    let radius = params.effective_truncation_radius() * sigma2.sqrt();
    let r2 = radius * radius;
    let xs = x.to_row_major();
    let ts = t_y.to_row_major();
    let grid = Grid::new(&xs, dim, radius);
    let inv2s = 0.5 / sigma2;
    let mut p1 = vec![0.0; m];
    let mut px = vec![0.0; m * dim];
    let mut sq = vec![0.0; m];
    for (i, t) in ts.chunks_exact(dim).enumerate() {
        grid.for_neighbors(t, |n| {
            if a[n] == 0.0 {
                return;
            }
            let xn = &xs[n * dim..(n + 1) * dim];
            let d2: f64 = xn.iter().zip(t).map(|(u, v)| (u - v) * (u - v)).sum();
            if d2 <= r2 {
                let p = (-d2 * inv2s).exp() * a[n];
                p1[i] += p;
                for k in 0..dim {
                    px[i * dim + k] += p * xn[k];
                }
                sq[i] += p * d2;
            }
        });
    }
    (p1, DMatrix::from_row_slice(m, dim, &px), sq)
}
