//! Built-in test shapes: a 2-D fish outline and a clustered 3-D surface cloud.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::pointset::PointSet;

/// Number of points in [`fish`].
pub const FISH_POINTS: usize = 91;
/// Number of points in [`bunny`].
pub const BUNNY_POINTS: usize = 1889;

const FISH_OUTLINE: [[f64; 2]; 20] = [
    [1.00, 0.00],
    [0.85, 0.17],
    [0.60, 0.30],
    [0.35, 0.36],
    [0.20, 0.55],
    [0.05, 0.36],
    [-0.25, 0.28],
    [-0.50, 0.15],
    [-0.70, 0.08],
    [-0.95, 0.38],
    [-0.85, 0.00],
    [-0.95, -0.38],
    [-0.70, -0.08],
    [-0.50, -0.15],
    [-0.20, -0.27],
    [0.05, -0.30],
    [0.10, -0.42],
    [0.25, -0.31],
    [0.60, -0.28],
    [0.85, -0.16],
];

/// Closed fish silhouette: a smooth curve through the outline vertices,
/// sampled at equal arc-length steps. The dorsal and pelvic fins differ, so
/// the shape has no mirror or rotational symmetry.
pub fn fish() -> PointSet {
    fish_with(FISH_POINTS)
}

/// Point `u` in `[0, 1]` of the uniform Catmull-Rom segment
/// between outline vertices `i` and `i + 1`.
fn outline_at(i: usize, u: f64) -> [f64; 2] {
    let n = FISH_OUTLINE.len();
    let p = |k: usize| FISH_OUTLINE[k % n];
    let (p0, p1, p2, p3) = (p(i + n - 1), p(i), p(i + 1), p(i + 2));
    let (u2, u3) = (u * u, u * u * u);
    let mut out = [0.0; 2];
    for c in 0..2 {
        out[c] = 0.5
            * (2.0 * p1[c]
                + (p2[c] - p0[c]) * u
                + (2.0 * p0[c] - 5.0 * p1[c] + 4.0 * p2[c] - p3[c]) * u2
                + (3.0 * p1[c] - p0[c] - 3.0 * p2[c] + p3[c]) * u3);
    }
    out
}

pub fn fish_with(count: usize) -> PointSet {
    const STEPS: usize = 256;
    let n = FISH_OUTLINE.len();
    let dense: Vec<[f64; 2]> = (0..n * STEPS).map(|k| outline_at(k / STEPS, (k % STEPS) as f64 / STEPS as f64)).collect();
    let mut arc = Vec::with_capacity(dense.len() + 1);
    arc.push(0.0);
    for k in 0..dense.len() {
        let (a, b) = (dense[k], dense[(k + 1) % dense.len()]);
        arc.push(arc[k] + ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2)).sqrt());
    }
    let total = arc[dense.len()];
    let mut out = Vec::with_capacity(count * 2);
    let mut k = 0;
    for j in 0..count {
        let s = total * j as f64 / count as f64;
        while arc[k + 1] < s {
            k += 1;
        }
        let f = (s - arc[k]) / (arc[k + 1] - arc[k]);
        let (a, b) = (dense[k], dense[(k + 1) % dense.len()]);
        out.push(a[0] + f * (b[0] - a[0]));
        out.push(a[1] + f * (b[1] - a[1]));
    }
    PointSet::from_row_slice(count, 2, &out).expect("fish outline is finite")
}

struct Part {
    center: [f64; 3],
    radii: [f64; 3],
    count: usize,
}

/// Surface samples of a body, head, two ears and a tail: a dense, clustered
/// cloud with the rough proportions of a scanned rabbit.
pub fn bunny() -> PointSet {
    bunny_with(BUNNY_POINTS, 0)
}

pub fn bunny_with(count: usize, seed: u64) -> PointSet {
    let parts = [
        Part { center: [0.0, 0.0, 0.0], radii: [1.0, 0.75, 0.8], count: 1000 },
        Part { center: [0.95, 0.0, 0.65], radii: [0.45, 0.4, 0.42], count: 420 },
        Part { center: [1.05, 0.17, 1.3], radii: [0.1, 0.07, 0.42], count: 150 },
        Part { center: [0.95, -0.2, 1.25], radii: [0.09, 0.07, 0.38], count: 140 },
        Part { center: [-1.05, 0.0, 0.15], radii: [0.2, 0.2, 0.2], count: 179 },
    ];
    let total: usize = parts.iter().map(|p| p.count).sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xb0_77);
    let mut out = Vec::with_capacity(count * 3);
    for (pi, part) in parts.iter().enumerate() {
        // Allocate the requested count proportionally, remainder to the body.
        let mut k = part.count * count / total;
        if pi == 0 {
            k += count - parts.iter().map(|p| p.count * count / total).sum::<usize>();
        }
        for _ in 0..k {
            let mut v = [0.0f64; 3];
            loop {
                for c in v.iter_mut() {
                    *c = StandardNormal.sample(&mut rng);
                }
                let norm = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
                if norm > 1e-9 {
                    v.iter_mut().for_each(|c| *c /= norm);
                    break;
                }
            }
            // Slight radial jitter gives the surface some thickness.
            let r = 1.0 + 0.01 * rng.random::<f64>();
            for c in 0..3 {
                out.push(part.center[c] + part.radii[c] * v[c] * r);
            }
        }
    }
    PointSet::from_row_slice(count, 3, &out).expect("bunny cloud is finite")
}
