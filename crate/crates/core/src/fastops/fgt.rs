//! Clustered Hermite expansion of the Gauss transform.
//!
//! Sources are grouped into small grid cells. Around the centroid `c` of a cell, with
//! `h = sqrt(2) sigma`, `s = (x - c) / h` and `t = (y - c) / h`,
//!
//! `exp(-|y - x|^2 / h^2) = sum_alpha s^alpha / alpha! * H_alpha(t) exp(-|t|^2)`
//!
//! where `H_alpha` are products of physicists' Hermite polynomials. Each
//! cluster keeps the moments `A_alpha = sum_x w_x s^alpha / alpha!` and every
//! target in range evaluates them directly. The truncation error at a target
//! carries a factor `exp(-|t|^2 / 2)`, so the degree is chosen per target and
//! falls off with distance; pairs for which the expansion costs more than
//! summing the cluster's sources are summed directly. When the kernel is wide
//! enough that a grid is cheaper, the transform is handed to [`super::grid`].

use std::collections::{BTreeMap, HashMap};

use nalgebra::DMatrix;

use super::{grid, row_major, FgtParams};
use crate::pointset::PointSet;

/// Constant in Cramer's inequality `|H_n(t)| exp(-t^2/2) <= K 2^{n/2} sqrt(n!)`.
const CRAMER: f64 = 1.086435;

/// Rough cost of one `exp` in units of a multiply-add.
const EXP_COST: f64 = 15.0;

/// Upper bound on the truncation error, per unit weight, of the total-degree
/// `< p` expansion for sources within `a` (in units of `h`) of the center.
pub(crate) fn truncation_bound(p: usize, a: f64, dim: usize) -> f64 {
    if a == 0.0 {
        return 0.0;
    }
    let u = std::f64::consts::SQRT_2 * a;
    // term_n = u^n sqrt(C(n + D - 1, D - 1) / n!)
    let mut term = 1.0f64;
    let mut tail = 0.0;
    for n in 0.. {
        if n >= p {
            tail += term;
        }
        let ratio = u * (((n + dim) as f64) / ((n + 1) as f64).powi(2)).sqrt();
        term *= ratio;
        if !term.is_finite() || n > p + 10_000 {
            return f64::INFINITY;
        }
        if term == 0.0 || (n >= p && ratio < 0.5 && term <= 1e-18 * tail) {
            break;
        }
    }
    CRAMER.powi(dim as i32) * tail
}

/// Number of multi-indices in `dim` variables with total degree `< p`.
fn terms(p: usize, dim: usize) -> usize {
    // C(p + dim - 1, dim)
    (0..dim).fold(1, |acc, k| acc * (p + k) / (k + 1))
}

/// Walks the multi-indices of total degree `< p` within a layout holding all
/// indices of degree `< pc` (nested lexicographic, last axis fastest). For
/// every run along the last axis calls `f(start, factor, len)`: positions
/// `start..start + len` hold the indices whose last component is `0..len`,
/// and `factor` is the product of the other axes' table entries.
#[inline(always)]
fn runs(tables: &[Vec<f64>], pc: usize, p: usize, mut f: impl FnMut(usize, f64, usize)) {
    match tables.len() {
        1 => f(0, 1.0, p),
        2 => {
            let mut start = 0;
            for i in 0..p {
                f(start, tables[0][i], p - i);
                start += pc - i;
            }
        }
        3 => {
            let mut block = 0;
            for i in 0..p {
                let ti = tables[0][i];
                let mut start = block;
                for j in 0..p - i {
                    f(start, ti * tables[1][j], p - i - j);
                    start += pc - i - j;
                }
                block += (pc - i) * (pc - i + 1) / 2;
            }
        }
        d => unreachable!("hermite expansion in {d} dimensions"),
    }
}

struct Cluster {
    center: Vec<f64>,
    radius: f64,
    members: Vec<usize>,
    /// Member coordinates and weights, row-major and contiguous.
    pts: Vec<f64>,
    wts: Vec<f64>,
    /// Moments are kept for total degree `< order`; 0 when every target is
    /// summed directly.
    order: usize,
    moments: Vec<f64>,
}

/// Integer cell of `p` on a grid of side `side`, padded to three axes.
fn cell(p: &[f64], side: f64) -> [i64; 3] {
    let mut k = [0i64; 3];
    for (slot, v) in k.iter_mut().zip(p) {
        // Float-to-int casts saturate, so far-away points cannot wrap around.
        *slot = (v / side).floor() as i64;
    }
    k
}

/// Groups sources by grid cell. The side starts at `2 radius / sqrt(D)`, so
/// every source lies within `radius` of its cell's center, and grows until at
/// most `max_clusters` cells are occupied. Clusters come out in cell order.
fn cluster_sources(src: &[f64], dim: usize, radius: f64, max_clusters: usize) -> Vec<Cluster> {
    let mut side = 2.0 * radius / (dim as f64).sqrt();
    let bins = loop {
        let mut bins: BTreeMap<[i64; 3], Vec<usize>> = BTreeMap::new();
        for (i, p) in src.chunks_exact(dim).enumerate() {
            bins.entry(cell(p, side)).or_default().push(i);
        }
        if bins.len() <= max_clusters.max(1) {
            break bins;
        }
        side *= 1.5;
    };
    bins.into_values()
        .map(|members| {
            let mut center = vec![0.0; dim];
            for &i in &members {
                for k in 0..dim {
                    center[k] += src[i * dim + k];
                }
            }
            center.iter_mut().for_each(|v| *v /= members.len() as f64);
            let radius = members
                .iter()
                .map(|&i| src[i * dim..(i + 1) * dim].iter().zip(&center).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
                .fold(0.0f64, f64::max)
                .sqrt();
            Cluster { center, radius, members, pts: Vec::new(), wts: Vec::new(), order: 0, moments: Vec::new() }
        })
        .collect()
}

/// Targets binned on a grid, for range queries around cluster centers.
struct TargetBins {
    dim: usize,
    side: f64,
    bins: HashMap<[i64; 3], Vec<u32>>,
}

impl TargetBins {
    fn new(tgt: &[f64], dim: usize, side: f64) -> Self {
        let mut bins: HashMap<[i64; 3], Vec<u32>> = HashMap::new();
        for (m, p) in tgt.chunks_exact(dim).enumerate() {
            bins.entry(cell(p, side)).or_default().push(m as u32);
        }
        Self { dim, side, bins }
    }

    /// Calls `f` with every target in the cells overlapping the box of
    /// half-width `reach` around `c`, in a fixed order.
    fn for_box(&self, c: &[f64], reach: f64, mut f: impl FnMut(u32)) {
        let mut lo = [0i64; 3];
        let mut hi = [0i64; 3];
        for k in 0..self.dim {
            lo[k] = ((c[k] - reach) / self.side).floor() as i64;
            hi[k] = ((c[k] + reach) / self.side).floor() as i64;
        }
        let cells: i128 = (0..self.dim).map(|k| (hi[k] - lo[k]) as i128 + 1).product();
        if cells > self.bins.len() as i128 {
            // Box larger than the occupied cells: scan those instead, sorted.
            let mut keys: Vec<&[i64; 3]> =
                self.bins.keys().filter(|key| (0..self.dim).all(|k| key[k] >= lo[k] && key[k] <= hi[k])).collect();
            keys.sort();
            for key in keys {
                self.bins[key].iter().for_each(|&m| f(m));
            }
            return;
        }
        let mut key = lo;
        loop {
            if let Some(list) = self.bins.get(&key) {
                list.iter().for_each(|&m| f(m));
            }
            // Odometer over the box, last axis fastest.
            let mut k = self.dim;
            loop {
                if k == 0 {
                    return;
                }
                k -= 1;
                if key[k] < hi[k] {
                    key[k] += 1;
                    break;
                }
                key[k] = lo[k];
            }
        }
    }
}

/// Physicists' Hermite polynomials `H_0(t) .. H_{p-1}(t)`.
#[inline]
fn hermite(t: f64, out: &mut [f64]) {
    out[0] = 1.0;
    if out.len() > 1 {
        out[1] = 2.0 * t;
    }
    for n in 1..out.len().saturating_sub(1) {
        out[n + 1] = 2.0 * t * out[n] - 2.0 * n as f64 * out[n - 1];
    }
}

/// Expansion degree for one target; degree 0 means direct summation.
#[derive(Clone, Copy)]
struct Pair {
    target: u32,
    order: u8,
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
    let colf = cols as f64;
    let h = (2.0 * sigma2).sqrt();
    let src = sources.to_row_major();
    let tgt = targets.to_row_major();
    let w = row_major(weights);
    let n_tgt = targets.count();

    // Half the budget for the far field, half for truncation.
    let cutoff = params.cutoff_ratio();
    let eps = 0.5 * params.epsilon;
    let ln_eps = eps.ln();
    let grid_plan = grid::plan(&src, &tgt, dim, cols, h, params.epsilon, cutoff);
    let grid_cost = grid_plan.as_ref().map_or(f64::INFINITY, |g| g.cost);
    let use_grid = |gp: Option<grid::GridPlan>| {
        let gp = gp.expect("finite grid cost");
        log::debug!("fgt: grid evaluation, q {}, cost {:.3e}", gp.q, gp.cost);
        grid::transform(sources, targets, weights, h, &gp)
    };
    let mut clusters = cluster_sources(&src, dim, params.cluster_radius * h, params.centers);
    let bins = TargetBins::new(&tgt, dim, cutoff * h);
    let mut total_cost = 0.0;
    let max_order = params.max_order.min(u8::MAX as usize);

    // Pairs in range of each cluster with their evaluation choice.
    let direct_per_source = 2.0 * dim as f64 + EXP_COST + colf;
    let expand_cost = |p: usize| terms(p, dim) as f64 * (colf + 1.0) + 2.0 * (p * dim) as f64 + EXP_COST;
    let mut pairs: Vec<Vec<Pair>> = Vec::with_capacity(clusters.len());
    let inv_h = 1.0 / h;
    for cl in clusters.iter_mut() {
        let a = cl.radius / h;
        let nk = cl.members.len() as f64;
        let direct = nk * direct_per_source;
        // |t|^2 beyond which degree p meets eps.
        let thresholds: Vec<(usize, f64)> = (params.order..=max_order)
            .filter(|&p| expand_cost(p) < direct)
            .map(|p| {
                let b = truncation_bound(p, a, dim);
                (p, if b > 0.0 { 2.0 * (b.ln() - ln_eps) } else { f64::NEG_INFINITY })
            })
            .collect();
        let reach2 = (cutoff + a) * (cutoff + a);
        let mut list = Vec::new();
        let mut top = 0;
        let mut saving = 0.0;
        let mut cost = 0.0;
        bins.for_box(&cl.center, (cutoff + a) * h, |m| {
            let y = &tgt[m as usize * dim..(m as usize + 1) * dim];
            let t2: f64 = y.iter().zip(&cl.center).map(|(a, b)| ((a - b) * inv_h).powi(2)).sum();
            if t2 > reach2 {
                return;
            }
            let order = thresholds.iter().find(|&&(_, tau)| t2 >= tau).map_or(0, |&(p, _)| p);
            if order > 0 {
                top = top.max(order);
                saving += direct - expand_cost(order);
                cost += expand_cost(order);
            } else {
                cost += direct;
            }
            list.push(Pair { target: m, order: order as u8 });
        });
        let build = nk * terms(top, dim) as f64 * (colf + 1.0);
        if top > 0 && build > saving {
            // Not worth the moments: sum everything directly.
            list.iter_mut().for_each(|p| p.order = 0);
            cost = list.len() as f64 * direct;
            top = 0;
        } else {
            cost += build;
        }
        cl.order = top;
        total_cost += cost;
        pairs.push(list);
        if total_cost >= grid_cost {
            return use_grid(grid_plan);
        }
    }
    log::debug!("fgt: {} clusters, h = {h:.3e}, cutoff {cutoff:.2} h, hermite cost {total_cost:.3e}", clusters.len());

    let mut tables = vec![vec![0.0; max_order]; dim];
    for cl in clusters.iter_mut() {
        let p = cl.order;
        cl.pts = cl.members.iter().flat_map(|&i| src[i * dim..(i + 1) * dim].iter().copied()).collect();
        cl.wts = cl.members.iter().flat_map(|&i| w[i * cols..(i + 1) * cols].iter().copied()).collect();
        if p == 0 {
            continue;
        }
        let mut mom = vec![0.0; terms(p, dim) * cols];
        for &i in &cl.members {
            for (k, tab) in tables.iter_mut().enumerate() {
                let s = (src[i * dim + k] - cl.center[k]) / h;
                tab[0] = 1.0;
                for n in 1..p {
                    tab[n] = tab[n - 1] * s / n as f64;
                }
            }
            let wi = &w[i * cols..(i + 1) * cols];
            let last = &tables[dim - 1];
            runs(&tables, p, p, |start, factor, len| {
                for k in 0..len {
                    let v = factor * last[k];
                    let row = &mut mom[(start + k) * cols..(start + k + 1) * cols];
                    for c in 0..cols {
                        row[c] += v * wi[c];
                    }
                }
            });
        }
        cl.moments = mom;
    }

    let inv_h2 = 1.0 / (h * h);
    let mut out = vec![0.0; n_tgt * cols];
    let mut acc = vec![0.0; cols];
    for (cl, list) in clusters.iter().zip(&pairs) {
        for pair in list {
            let m = pair.target as usize;
            let y = &tgt[m * dim..(m + 1) * dim];
            let res = &mut out[m * cols..(m + 1) * cols];
            let p = pair.order as usize;
            if p == 0 {
                for (x, wi) in cl.pts.chunks_exact(dim).zip(cl.wts.chunks_exact(cols)) {
                    let mut d2 = 0.0;
                    for k in 0..dim {
                        let diff = y[k] - x[k];
                        d2 += diff * diff;
                    }
                    let g = (-d2 * inv_h2).exp();
                    for c in 0..cols {
                        res[c] += g * wi[c];
                    }
                }
                continue;
            }
            let mut dc2 = 0.0;
            for (k, tab) in tables.iter_mut().enumerate() {
                let t = (y[k] - cl.center[k]) / h;
                dc2 += t * t;
                hermite(t, &mut tab[..p]);
            }
            let e = (-dc2).exp();
            if e == 0.0 {
                continue;
            }
            acc.iter_mut().for_each(|v| *v = 0.0);
            let last = &tables[dim - 1];
            let mom = &cl.moments;
            if cols == 1 {
                runs(&tables, cl.order, p, |start, factor, len| {
                    let dot: f64 = mom[start..start + len].iter().zip(&last[..len]).map(|(a, b)| a * b).sum();
                    acc[0] += factor * dot;
                });
            } else {
                runs(&tables, cl.order, p, |start, factor, len| {
                    for k in 0..len {
                        let v = factor * last[k];
                        let row = &mom[(start + k) * cols..(start + k + 1) * cols];
                        for c in 0..cols {
                            acc[c] += v * row[c];
                        }
                    }
                });
            }
            for c in 0..cols {
                res[c] += e * acc[c];
            }
        }
    }
    DMatrix::from_row_slice(n_tgt, cols, &out)
}
