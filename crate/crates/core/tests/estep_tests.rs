use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use pointreg::estep::{
    compute_posteriors, init_sigma2, negative_log_likelihood, objective_q, outlier_constant, MixtureParams,
    SIGMA2_FLOOR,
};
use pointreg::harness::synth::uniform_rotation;
use pointreg::rigid::RigidTransform;
use pointreg::PointSet;

fn random_points(n: usize, d: usize, rng: &mut ChaCha8Rng) -> PointSet {
    PointSet::new(DMatrix::from_fn(n, d, |_, _| StandardNormal.sample(rng))).unwrap()
}

fn pts(rows: &[&[f64]]) -> PointSet {
    PointSet::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
}

fn dist2(x: &PointSet, n: usize, y: &PointSet, m: usize) -> f64 {
    (x.row(n) - y.row(m)).norm_squared()
}

/// Posterior matrix straight from the definition, one column at a time.
fn oracle_posteriors(x: &PointSet, y: &PointSet, sigma2: f64, w: f64) -> (DMatrix<f64>, Vec<f64>) {
    let (n, m, d) = (x.count(), y.count(), x.dim());
    let c = (2.0 * PI * sigma2).powf(d as f64 / 2.0) * w / (1.0 - w) * m as f64 / n as f64;
    let mut p = DMatrix::zeros(m, n);
    let mut outlier = vec![0.0; n];
    for j in 0..n {
        let k: Vec<f64> = (0..m).map(|i| (-dist2(x, j, y, i) / (2.0 * sigma2)).exp()).collect();
        let den: f64 = k.iter().sum::<f64>() + c;
        for i in 0..m {
            p[(i, j)] = k[i] / den;
        }
        outlier[j] = c / den;
    }
    (p, outlier)
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-300)
}

#[test]
fn init_sigma2_hand_values() {
    let (s, clamped) = init_sigma2(&pts(&[&[0.0]]), &pts(&[&[0.0]])).unwrap();
    assert_eq!(s, SIGMA2_FLOOR);
    assert!(clamped);
    let (s, clamped) = init_sigma2(&pts(&[&[0.0], &[2.0]]), &pts(&[&[0.0]])).unwrap();
    assert!((s - 2.0).abs() < 1e-15);
    assert!(!clamped);
}

#[test]
fn init_sigma2_matches_double_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = random_points(50, 3, &mut rng);
    let y = PointSet::new(random_points(50, 3, &mut rng).matrix().add_scalar(3.0)).unwrap();
    let mut total = 0.0;
    for n in 0..50 {
        for m in 0..50 {
            total += dist2(&x, n, &y, m);
        }
    }
    let expected = total / (3.0 * 50.0 * 50.0);
    assert!(rel(init_sigma2(&x, &y).unwrap().0, expected) < 1e-12);
}

#[test]
fn init_sigma2_rejects_mixed_dimensions() {
    assert!(init_sigma2(&pts(&[&[0.0, 1.0]]), &pts(&[&[0.0]])).is_err());
}

#[test]
fn outlier_constant_hand_values() {
    let c = |s2, w, m, n, d| outlier_constant(&MixtureParams::new(s2, w).unwrap(), m, n, d).unwrap();
    assert_eq!(c(1.0, 0.0, 3, 5, 2), 0.0);
    assert!((c(1.0, 0.5, 1, 1, 1) - (2.0 * PI).sqrt()).abs() < 1e-12);
    assert!((c(2.0, 0.3, 4, 8, 2) - 6.0 * PI / 7.0).abs() < 1e-12);
    assert!(MixtureParams::new(1.0, 1.0).is_err());
    assert!(MixtureParams::new(0.0, 0.1).is_err());
}

#[test]
fn single_component_posteriors() {
    let x = pts(&[&[0.0]]);
    let s = compute_posteriors(&x, &x, &MixtureParams::new(1.0, 0.0).unwrap(), true).unwrap();
    assert_eq!(s.dense_p.as_ref().unwrap()[(0, 0)], 1.0);
    assert_eq!(s.np, 1.0);
    let s = compute_posteriors(&x, &x, &MixtureParams::new(1.0, 0.5).unwrap(), true).unwrap();
    let expected = 1.0 / (1.0 + (2.0 * PI).sqrt());
    assert!((s.dense_p.unwrap()[(0, 0)] - expected).abs() < 1e-12);
    assert!((expected - 0.28518).abs() < 1e-5);
}

#[test]
fn streaming_products_match_dense_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for (m, n) in [(20, 30), (200, 200)] {
        let y = random_points(m, 2, &mut rng);
        let x = random_points(n, 2, &mut rng);
        let (sigma2, w) = (0.4, 0.2);
        let s = compute_posteriors(&x, &y, &MixtureParams::new(sigma2, w).unwrap(), true).unwrap();
        let (p, _) = oracle_posteriors(&x, &y, sigma2, w);
        assert!((s.dense_p.as_ref().unwrap() - &p).abs().max() < 1e-12);
        let p1 = &p * DVector::from_element(n, 1.0);
        let pt1 = p.transpose() * DVector::from_element(m, 1.0);
        for i in 0..m {
            assert!((s.p1[i] - p1[i]).abs() < 1e-12);
        }
        for j in 0..n {
            assert!((s.pt1[j] - pt1[j]).abs() < 1e-12);
        }
        assert!((&s.px - &p * x.matrix()).abs().max() < 1e-12);
        assert!(rel(s.np, pt1.sum()) < 1e-12);
    }
}

#[test]
fn objective_hand_values_and_double_loop() {
    let x = pts(&[&[0.0]]);
    let s = compute_posteriors(&x, &x, &MixtureParams::new(1.0, 0.0).unwrap(), true).unwrap();
    assert_eq!(objective_q(&s, &x, &x, 1.0).unwrap(), 0.0);
    let t = pts(&[&[2f64.sqrt()]]);
    assert!((objective_q(&s, &x, &t, 1.0).unwrap() - 1.0).abs() < 1e-12);
    assert!(objective_q(&s, &x, &t, 0.0).is_err());

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let y = random_points(12, 3, &mut rng);
    let x = random_points(17, 3, &mut rng);
    let s = compute_posteriors(&x, &y, &MixtureParams::new(0.7, 0.1).unwrap(), true).unwrap();
    let p = s.dense_p.as_ref().unwrap();
    let s2 = 0.35;
    let mut acc = 0.0;
    for m in 0..12 {
        for n in 0..17 {
            acc += p[(m, n)] * dist2(&x, n, &y, m);
        }
    }
    let expected = acc / (2.0 * s2) + 0.5 * s.np * 3.0 * s2.ln();
    assert!(rel(objective_q(&s, &x, &y, s2).unwrap(), expected) < 1e-12);
}

#[test]
fn objective_minimized_by_closed_form_variance() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let y = random_points(15, 2, &mut rng);
    let x = random_points(25, 2, &mut rng);
    let s = compute_posteriors(&x, &y, &MixtureParams::new(0.5, 0.3).unwrap(), true).unwrap();
    let residual: f64 = s.p_sqdist.iter().sum();
    let best = residual / (s.np * 2.0);
    let q_best = objective_q(&s, &x, &y, best).unwrap();
    for k in 1..=100 {
        let s2 = best * (0.05 + 0.04 * k as f64);
        assert!(q_best <= objective_q(&s, &x, &y, s2).unwrap() + 1e-12);
    }
}

#[test]
fn likelihood_hand_value_and_determinism() {
    let x = pts(&[&[0.0]]);
    let e = negative_log_likelihood(&x, &x, &MixtureParams::new(1.0, 0.0).unwrap()).unwrap();
    assert!((e - 0.5 * (2.0 * PI).ln()).abs() < 1e-12);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let y = random_points(10, 3, &mut rng);
    let x = random_points(14, 3, &mut rng);
    let params = MixtureParams::new(0.3, 0.25).unwrap();
    assert_eq!(
        negative_log_likelihood(&x, &y, &params).unwrap().to_bits(),
        negative_log_likelihood(&x, &y, &params).unwrap().to_bits()
    );
}

#[test]
fn likelihood_matches_direct_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let y = random_points(9, 2, &mut rng);
    let x = random_points(13, 2, &mut rng);
    let (sigma2, w) = (0.8, 0.4);
    let norm = (2.0 * PI * sigma2).powf(-1.0);
    let mut expected = 0.0;
    for n in 0..13 {
        let mix: f64 = (0..9).map(|m| norm * (-dist2(&x, n, &y, m) / (2.0 * sigma2)).exp()).sum();
        expected -= (w / 13.0 + (1.0 - w) / 9.0 * mix).ln();
    }
    let e = negative_log_likelihood(&x, &y, &MixtureParams::new(sigma2, w).unwrap()).unwrap();
    assert!(rel(e, expected) < 1e-12);
    let s = compute_posteriors(&x, &y, &MixtureParams::new(sigma2, w).unwrap(), false).unwrap();
    assert!(rel(s.nll, expected) < 1e-12);
}

#[test]
fn likelihood_stays_finite_far_from_the_model() {
    let x = pts(&[&[0.0]]);
    let far = pts(&[&[1e6]]);
    let sigma2 = 1e-6;
    let e = negative_log_likelihood(&x, &far, &MixtureParams::new(sigma2, 0.0).unwrap()).unwrap();
    let expected = 1e12 / (2.0 * sigma2) + 0.5 * (2.0 * PI * sigma2).ln();
    assert!(rel(e, expected) < 1e-12);
}

#[test]
fn underflow_guard_keeps_columns_normalized() {
    let x = pts(&[&[0.0, 0.0], &[50.0, 0.0]]);
    let y = pts(&[&[10.0, 0.0], &[11.0, 0.0]]);
    let s = compute_posteriors(&x, &y, &MixtureParams::new(1e-4, 0.0).unwrap(), true).unwrap();
    for v in s.pt1.iter().chain(s.p1.iter()) {
        assert!(v.is_finite());
    }
    assert!(s.pt1.iter().all(|v| (v - 1.0).abs() < 1e-12));
}

/// Posterior normalization on 100 seeded instances of varying shape.
#[test]
fn normalization_battery() {
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = rng.random_range(1..=4);
        let y = random_points(rng.random_range(1..30), d, &mut rng);
        let x = random_points(rng.random_range(1..30), d, &mut rng);
        let w = if seed % 4 == 0 { 0.0 } else { rng.random_range(0.0..0.95) };
        let sigma2 = 10f64.powf(rng.random_range(-2.0..1.0));
        let s = compute_posteriors(&x, &y, &MixtureParams::new(sigma2, w).unwrap(), false).unwrap();
        let (_, outlier) = oracle_posteriors(&x, &y, sigma2, w);
        for n in 0..x.count() {
            assert!((0.0..=1.0 + 1e-12).contains(&s.pt1[n]), "seed {seed}");
            assert!((s.pt1[n] + outlier[n] - 1.0).abs() < 1e-12, "seed {seed}");
        }
        let n = x.count() as f64;
        assert!(rel(s.np, s.p1.iter().sum()) < 1e-9 && rel(s.np, s.pt1.iter().sum()) < 1e-9, "seed {seed}");
        assert!(s.np >= 0.0 && s.np <= n * (1.0 + 1e-12));
        if w == 0.0 {
            assert!(rel(s.np, n) < 1e-9, "seed {seed}");
        }
    }
}

fn point_sets(max: usize) -> impl Strategy<Value = (PointSet, PointSet)> {
    (1usize..=3, 1usize..max, 1usize..max).prop_flat_map(|(d, n, m)| {
        (
            prop::collection::vec(-3.0f64..3.0, n * d).prop_map(move |v| PointSet::from_row_slice(n, d, &v).unwrap()),
            prop::collection::vec(-3.0f64..3.0, m * d).prop_map(move |v| PointSet::from_row_slice(m, d, &v).unwrap()),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn invariant_under_rigid_motion((x, y) in point_sets(20), sigma2 in 0.05f64..4.0, w in 0.0f64..0.9, seed in any::<u64>()) {
        let d = x.dim();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let motion = RigidTransform {
            r: uniform_rotation(d, &mut rng),
            s: 1.0,
            t: DVector::from_fn(d, |_, _| rng.random_range(-10.0..10.0)),
        };
        let params = MixtureParams::new(sigma2, w).unwrap();
        let a = compute_posteriors(&x, &y, &params, false).unwrap();
        let b = compute_posteriors(&motion.apply(&x).unwrap(), &motion.apply(&y).unwrap(), &params, false).unwrap();
        let close = |u: f64, v: f64| (u - v).abs() <= 1e-9 * u.abs().max(v.abs()).max(1e-12);
        prop_assert!(a.p1.iter().zip(&b.p1).all(|(u, v)| close(*u, *v)));
        prop_assert!(a.pt1.iter().zip(&b.pt1).all(|(u, v)| close(*u, *v)));
        prop_assert!(close(a.np, b.np));
        prop_assert!(close(a.nll, b.nll));
    }

    #[test]
    fn zero_outlier_weight_gives_unit_columns((x, y) in point_sets(25), sigma2 in 1e-3f64..10.0) {
        let s = compute_posteriors(&x, &y, &MixtureParams::new(sigma2, 0.0).unwrap(), false).unwrap();
        prop_assert!(s.pt1.iter().all(|v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn products_are_finite_and_bounded((x, y) in point_sets(25), sigma2 in 1e-6f64..10.0, w in 0.0f64..0.99) {
        let s = compute_posteriors(&x, &y, &MixtureParams::new(sigma2, w).unwrap(), false).unwrap();
        let xmax = x.matrix().abs().max();
        for m in 0..y.count() {
            prop_assert!(s.p1[m] >= 0.0 && s.p1[m].is_finite());
            for k in 0..x.dim() {
                prop_assert!(s.px[(m, k)].abs() <= s.p1[m] * xmax * (1.0 + 1e-12) + 1e-300);
            }
        }
    }
}
