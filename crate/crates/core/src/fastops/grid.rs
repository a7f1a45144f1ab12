//! Gauss transform through a regular grid, for kernels that are wide compared
//! to the point spacing.
//!
//! Source weights are spread onto grid nodes with tensor Lagrange weights of
//! order `q`, convolved with the sampled Gaussian one axis at a time (the
//! kernel is separable), and interpolated back at the targets with the same
//! weights. With spacing `delta` and `h = sqrt(2) sigma`, the interpolation
//! error of one side and one axis is at most
//! `K 2^{q/2} ((q-1)!!)^2 / (2^q sqrt(q!)) (delta / h)^q` per unit weight.

use nalgebra::DMatrix;

use super::row_major;
use crate::pointset::PointSet;

const CRAMER: f64 = 1.086435;

/// Bound on the Lebesgue constant of central-interval equispaced interpolation
/// for the orders used here.
const LEBESGUE: f64 = 2.0;

const ORDERS: [usize; 7] = [4, 6, 8, 10, 12, 14, 16];

/// Largest grid this evaluator will allocate, in `f64` entries.
const MAX_ENTRIES: f64 = 3.0e7;

/// Width, in `f64`s, of the slabs the convolution works on.
const TILE: usize = 512;

/// Interpolation error constant of an order-`q` stencil: error `<= c (delta/h)^q`.
fn stencil_constant(q: usize) -> f64 {
    let dfact: f64 = (1..q).step_by(2).map(|k| k as f64).product();
    let ln_fact: f64 = (1..=q).map(|k| (k as f64).ln()).sum();
    CRAMER * 2f64.powf(q as f64 / 2.0) * dfact * dfact / 2f64.powi(q as i32) / (0.5 * ln_fact).exp()
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct GridPlan {
    pub q: usize,
    delta: f64,
    lo: Vec<f64>,
    shape: Vec<usize>,
    /// Convolution half-width in nodes.
    reach: usize,
    pub cost: f64,
}

/// Cheapest grid meeting `eps` per unit weight, or `None` if every candidate
/// would exceed the memory cap.
pub(crate) fn plan(
    src: &[f64],
    tgt: &[f64],
    dim: usize,
    cols: usize,
    h: f64,
    eps: f64,
    cutoff: f64,
) -> Option<GridPlan> {
    let mut lo = vec![f64::INFINITY; dim];
    let mut hi = vec![f64::NEG_INFINITY; dim];
    for p in src.chunks_exact(dim).chain(tgt.chunks_exact(dim)) {
        for k in 0..dim {
            lo[k] = lo[k].min(p[k]);
            hi[k] = hi[k].max(p[k]);
        }
    }
    let n_pts = ((src.len() + tgt.len()) / dim) as f64;
    let lam = LEBESGUE.powi(dim as i32 - 1);
    // Two sides, `dim` axes each, a third of the budget for the interpolation
    // and the rest for the convolution cutoff.
    let eps_axis = eps / (3.0 * 2.0 * dim as f64 * lam);
    let mut best: Option<GridPlan> = None;
    for &q in &ORDERS {
        let ratio = (eps_axis / stencil_constant(q)).powf(1.0 / q as f64).min(1.0);
        let delta = ratio * h;
        let half = q / 2;
        let mut shape = Vec::with_capacity(dim);
        let mut nodes = 1.0;
        let mut origin = Vec::with_capacity(dim);
        for k in 0..dim {
            let n = ((hi[k] - lo[k]) / delta).floor() as usize + q + 1;
            origin.push(lo[k] - half as f64 * delta);
            shape.push(n);
            nodes *= n as f64;
        }
        if nodes * cols as f64 > MAX_ENTRIES {
            continue;
        }
        // Spreading and interpolation can each amplify the dropped tail by `LEBESGUE^dim`.
        let conv_cut = (cutoff * cutoff + 2.0 * dim as f64 * LEBESGUE.ln()).sqrt();
        let reach = (conv_cut * h / delta).ceil() as usize;
        let stencil = (q as f64).powi(dim as i32);
        let cost = n_pts * stencil * (cols as f64 + 1.0) + nodes * dim as f64 * (2 * reach + 1) as f64 * cols as f64;
        if best.as_ref().is_none_or(|b| cost < b.cost) {
            best = Some(GridPlan { q, delta, lo: origin, shape, reach, cost });
        }
    }
    best
}

/// Node offset of the stencil and its weights along one axis.
#[inline]
fn stencil(x: f64, lo: f64, delta: f64, q: usize, out: &mut [f64]) -> usize {
    let u = (x - lo) / delta;
    let base = u.floor();
    let s = u - base;
    let first = base as usize + 1 - q / 2;
    // Nodes at offsets m - (q/2 - 1), m = 0..q, relative to floor(u).
    let shift = (q / 2 - 1) as f64;
    for j in 0..q {
        let xj = j as f64 - shift;
        let mut v = 1.0;
        for m in 0..q {
            if m != j {
                let xm = m as f64 - shift;
                v *= (s - xm) / (xj - xm);
            }
        }
        out[j] = v;
    }
    first
}

/// The stencil as runs along the last axis: `(first flat node, weight)` for
/// every combination of the other axes. Each run covers `q` consecutive nodes
/// weighted by `weights[dim - 1]`.
fn stencil_runs(first: &[usize], weights: &[Vec<f64>], strides: &[usize], q: usize, out: &mut Vec<(usize, f64)>) {
    let dim = first.len();
    out.clear();
    out.push((first[dim - 1], 1.0));
    for k in (0..dim - 1).rev() {
        let n = out.len();
        for j in 1..q {
            for r in 0..n {
                let (at, w) = out[r];
                out.push((at + (first[k] + j) * strides[k], w * weights[k][j]));
            }
        }
        for r in 0..n {
            let (at, w) = out[r];
            out[r] = (at + first[k] * strides[k], w * weights[k][0]);
        }
    }
}

pub(crate) fn transform(
    sources: &PointSet,
    targets: &PointSet,
    weights: &DMatrix<f64>,
    h: f64,
    plan: &GridPlan,
) -> DMatrix<f64> {
    let dim = sources.dim();
    let cols = weights.ncols();
    let q = plan.q;
    let src = sources.to_row_major();
    let tgt = targets.to_row_major();
    let w = row_major(weights);

    // Last axis fastest.
    let mut strides = vec![1usize; dim];
    for k in (0..dim.saturating_sub(1)).rev() {
        strides[k] = strides[k + 1] * plan.shape[k + 1];
    }
    let nodes: usize = plan.shape.iter().product();
    let mut grid = vec![0.0; nodes * cols];

    let mut lw = vec![vec![0.0; q]; dim];
    let mut first = vec![0usize; dim];
    let mut runs = Vec::new();
    let mut row = vec![0.0; q * cols];
    for (i, p) in src.chunks_exact(dim).enumerate() {
        for k in 0..dim {
            first[k] = stencil(p[k], plan.lo[k], plan.delta, q, &mut lw[k]);
        }
        let wi = &w[i * cols..(i + 1) * cols];
        // One row of weighted values, reused for every run.
        for j in 0..q {
            for c in 0..cols {
                row[j * cols + c] = lw[dim - 1][j] * wi[c];
            }
        }
        stencil_runs(&first, &lw, &strides, q, &mut runs);
        for &(at, v) in &runs {
            let g = &mut grid[at * cols..(at + q) * cols];
            for (gv, rv) in g.iter_mut().zip(&row) {
                *gv += v * rv;
            }
        }
    }

    let kernel: Vec<f64> = (0..=plan.reach).map(|d| (-(d as f64 * plan.delta / h).powi(2)).exp()).collect();
    let mut next = vec![0.0; grid.len()];
    for k in 0..dim {
        let n = plan.shape[k];
        let inner = strides[k] * cols;
        next.iter_mut().for_each(|v| *v = 0.0);
        let r = plan.reach.min(n - 1);
        for (src_block, dst_block) in grid.chunks_exact(n * inner).zip(next.chunks_exact_mut(n * inner)) {
            if inner < TILE {
                // Short lines stay in cache: one shifted axpy per tap.
                for (d, &g) in kernel.iter().enumerate().take(r + 1) {
                    let len = (n - d) * inner;
                    let shift = d * inner;
                    for (o, v) in dst_block[..len].iter_mut().zip(&src_block[shift..]) {
                        *o += g * v;
                    }
                    if d > 0 {
                        for (o, v) in dst_block[shift..].iter_mut().zip(&src_block[..len]) {
                            *o += g * v;
                        }
                    }
                }
                continue;
            }
            // Tiles across the inner extent keep every tap's rows in cache.
            for t0 in (0..inner).step_by(TILE) {
                let t1 = (t0 + TILE).min(inner);
                for i in 0..n {
                    let out = &mut dst_block[i * inner + t0..i * inner + t1];
                    for (d, &g) in kernel.iter().enumerate().take(r + 1) {
                        if i + d < n {
                            let v = &src_block[(i + d) * inner + t0..(i + d) * inner + t1];
                            out.iter_mut().zip(v).for_each(|(o, v)| *o += g * v);
                        }
                        if d > 0 && d <= i {
                            let v = &src_block[(i - d) * inner + t0..(i - d) * inner + t1];
                            out.iter_mut().zip(v).for_each(|(o, v)| *o += g * v);
                        }
                    }
                }
            }
        }
        std::mem::swap(&mut grid, &mut next);
    }
    drop(next);

    let n_tgt = targets.count();
    let mut out = vec![0.0; n_tgt * cols];
    let mut line_acc = vec![0.0; q * cols];
    for (m, p) in tgt.chunks_exact(dim).enumerate() {
        for k in 0..dim {
            first[k] = stencil(p[k], plan.lo[k], plan.delta, q, &mut lw[k]);
        }
        stencil_runs(&first, &lw, &strides, q, &mut runs);
        line_acc.iter_mut().for_each(|v| *v = 0.0);
        for &(at, v) in &runs {
            let g = &grid[at * cols..(at + q) * cols];
            for (a, gv) in line_acc.iter_mut().zip(g) {
                *a += v * gv;
            }
        }
        let res = &mut out[m * cols..(m + 1) * cols];
        for j in 0..q {
            let l = lw[dim - 1][j];
            for c in 0..cols {
                res[c] += l * line_acc[j * cols + c];
            }
        }
    }
    DMatrix::from_row_slice(n_tgt, cols, &out)
}
