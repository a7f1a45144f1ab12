use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use pointreg::harness::bench::nll_monotone;
use pointreg::harness::shapes::{bunny_with, fish};
use pointreg::harness::synth::uniform_rotation;
use pointreg::harness::{
    correspondence_mse, denormalize_transform, evaluate, icp_baseline, load_pointset, normalize, parse_pointset, rotation_error,
    run_benchmark, save_pointset, synth_pair, Axis, BenchGrid, DegradationSpec, NormalizationParams, Shape, TransformKind,
};
use pointreg::report::Method;
use pointreg::rigid::{AffineTransform, RigidTransform};
use pointreg::{register_affine, register_nonrigid, register_rigid, PointSet, RegError, RegistrationConfig, RegistrationReport, Transform};

fn random_points(n: usize, d: usize, rng: &mut ChaCha8Rng) -> PointSet {
    PointSet::new(DMatrix::from_fn(n, d, |_, _| StandardNormal.sample(rng))).unwrap()
}

fn random_normalization(d: usize, rng: &mut ChaCha8Rng) -> NormalizationParams {
    NormalizationParams { mu: DVector::from_fn(d, |_, _| rng.random_range(-5.0..5.0)), rho: rng.random_range(0.1..10.0) }
}

fn max_dev(a: &PointSet, b: &PointSet) -> f64 {
    (a.matrix() - b.matrix()).abs().max()
}

#[test]
fn normalize_examples() {
    let p = PointSet::from_rows(&[vec![0.0], vec![2.0]]).unwrap();
    let (q, params, _) = normalize(&p).unwrap();
    assert_eq!((params.mu[0], params.rho), (1.0, 1.0));
    assert_eq!(q.rows(), vec![vec![-1.0], vec![1.0]]);

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (once, _, _) = normalize(&random_points(50, 3, &mut rng)).unwrap();
    let (twice, params, _) = normalize(&once).unwrap();
    assert!(params.mu.norm() < 1e-12 && (params.rho - 1.0).abs() < 1e-12);
    assert!(max_dev(&once, &twice) < 1e-12);
}

#[test]
fn normalization_battery() {
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = rng.random_range(1..=4);
        let n = rng.random_range(1..60);
        let p = PointSet::new(DMatrix::from_fn(n, d, |_, _| rng.random_range(-100.0..100.0))).unwrap();
        let (q, params, degenerate) = normalize(&p).unwrap();
        assert!(params.rho > 0.0);
        let back = params.invert(&q).unwrap();
        let scale = p.matrix().abs().max().max(1.0);
        assert!(max_dev(&back, &p) <= 1e-12 * scale, "seed {seed}");
        if !degenerate {
            assert!(q.centroid().norm() <= 1e-12, "seed {seed}");
            let var = q.matrix().norm_squared() / (n * d) as f64;
            assert!((var - 1.0).abs() <= 1e-12, "seed {seed}");
        }
    }
}

#[test]
fn denormalize_scalar_case() {
    let nx = NormalizationParams { mu: DVector::from_element(1, 3.0), rho: 2.0 };
    let ny = NormalizationParams::identity(1);
    let t = Transform::Rigid(RigidTransform::identity(1));
    let out = denormalize_transform(&t, &nx, &ny);
    let r = out.as_rigid().unwrap();
    assert_eq!((r.s, r.t[0], r.r[(0, 0)]), (2.0, 3.0, 1.0));
    let same = denormalize_transform(&t, &NormalizationParams::identity(1), &ny);
    assert_eq!(same, t);
}

#[test]
fn denormalize_commutes() {
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = 2 + (seed % 2) as usize;
        let (nx, ny) = (random_normalization(d, &mut rng), random_normalization(d, &mut rng));
        let y = random_points(20, d, &mut rng);
        let candidates = [
            Transform::Rigid(RigidTransform {
                r: uniform_rotation(d, &mut rng),
                s: rng.random_range(0.5..2.0),
                t: DVector::from_fn(d, |_, _| rng.random_range(-1.0..1.0)),
            }),
            Transform::Affine(AffineTransform {
                b: DMatrix::from_fn(d, d, |_, _| StandardNormal.sample(&mut rng)),
                t: DVector::from_fn(d, |_, _| rng.random_range(-1.0..1.0)),
            }),
        ];
        for t in candidates {
            let direct = denormalize_transform(&t, &nx, &ny).apply(&y).unwrap();
            let via = nx.invert(&t.apply(&ny.apply(&y).unwrap()).unwrap()).unwrap();
            let scale = via.matrix().abs().max().max(1.0);
            assert!(max_dev(&direct, &via) <= 1e-10 * scale, "seed {seed}");
        }
    }
}

#[test]
fn point_file_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let p = PointSet::new(DMatrix::from_fn(100, 3, |_, _| {
        let v: f64 = StandardNormal.sample(&mut rng);
        v * 10f64.powi(rng.random_range(-8..8))
    }))
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.txt");
    save_pointset(&p, &path).unwrap();
    let back = load_pointset(&path).unwrap();
    assert_eq!(back, p);
}

#[test]
fn point_file_parsing() {
    let p = parse_pointset("# header\n0 0\n\n1 2  # trailing\n").unwrap();
    assert_eq!(p.rows(), vec![vec![0.0, 0.0], vec![1.0, 2.0]]);
    match parse_pointset("0 0\n1 2 3\n") {
        Err(RegError::Parse { line, .. }) => assert_eq!(line, 2),
        other => panic!("{other:?}"),
    }
    match parse_pointset("0 0\n1 2\n3 x\n") {
        Err(RegError::Parse { line, message }) => assert!(line == 3 && message.contains('x')),
        other => panic!("{other:?}"),
    }
    let err = parse_pointset("").unwrap_err();
    assert!(err.to_string().contains("no points"), "{err}");
    assert!(parse_pointset("# only a comment\n").is_err());
}

#[test]
fn synth_is_deterministic() {
    let spec = DegradationSpec { deform: 0.05, noise: 0.01, outliers: 20, seed: 9, ..DegradationSpec::default() };
    for kind in [TransformKind::Rigid, TransformKind::Affine, TransformKind::Nonrigid] {
        let a = synth_pair(&spec, &fish(), kind).unwrap();
        let b = synth_pair(&spec, &fish(), kind).unwrap();
        assert_eq!(a.x, b.x);
        assert_eq!(a.y, b.y);
        assert_eq!(a.truth, b.truth);
        let c = synth_pair(&DegradationSpec { seed: 10, ..spec.clone() }, &fish(), kind).unwrap();
        assert_ne!(a.x, c.x);
    }
}

#[test]
fn synth_clean_rigid_pair() {
    let base = fish();
    let pair = synth_pair(&DegradationSpec::default(), &base, TransformKind::Rigid).unwrap();
    let t = pair.truth.transform.as_ref().unwrap().as_rigid().unwrap();
    let angle = t.r[(1, 0)].atan2(t.r[(0, 0)]).abs();
    assert!((angle - 50f64.to_radians()).abs() < 1e-12);
    let moved = t.apply(&pair.y).unwrap();
    assert_eq!(pair.truth.pairs.len(), base.count());
    for &(m, n) in &pair.truth.pairs {
        assert!((moved.row(m) - pair.x.row(n)).abs().max() <= 1e-12 * pair.x.matrix().abs().max());
    }
}

#[test]
fn synth_outlier_counts() {
    let base = bunny_with(1000, 0);
    for count in [600, 1800, 3000] {
        let spec = DegradationSpec { outliers: count, ..DegradationSpec::default() };
        let pair = synth_pair(&spec, &base, TransformKind::Rigid).unwrap();
        assert_eq!(pair.x.count(), 1000 + count);
        assert_eq!(pair.y.count(), 1000);
    }
}

#[test]
fn synth_zero_deform_keeps_base() {
    let base = fish();
    let spec = DegradationSpec { translation: 0.0, ..DegradationSpec::default() };
    let pair = synth_pair(&spec, &base, TransformKind::Nonrigid).unwrap();
    assert_eq!(pair.y, base);
    assert_eq!(pair.truth.x_clean, base);
    for &(m, n) in &pair.truth.pairs {
        assert_eq!(pair.x.row(n), base.row(m));
    }
}

#[test]
fn synth_missing_everything_is_an_error() {
    let spec = DegradationSpec { missing: vec!["x:0:0:1".parse().unwrap()], ..DegradationSpec::default() };
    assert!(synth_pair(&spec, &fish(), TransformKind::Rigid).is_err());
}

#[test]
fn rotation_error_examples() {
    let id = DMatrix::<f64>::identity(2, 2);
    assert_eq!(rotation_error(&id, &id).unwrap(), 0.0);
    let half = -id.clone();
    assert!((rotation_error(&id, &half).unwrap() - 2.0 * 2f64.sqrt()).abs() < 1e-15);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (a, b, q) = (uniform_rotation(3, &mut rng), uniform_rotation(3, &mut rng), uniform_rotation(3, &mut rng));
    assert!((rotation_error(&a, &b).unwrap() - rotation_error(&(&a * &q), &(&b * &q)).unwrap()).abs() < 1e-12);
    assert!(rotation_error(&id, &DMatrix::identity(3, 3)).is_err());
}

#[test]
fn correspondence_mse_examples() {
    let a = PointSet::from_rows(&[vec![0.0], vec![1.0], vec![5.0]]).unwrap();
    assert_eq!(correspondence_mse(&a, &a).unwrap(), 0.0);
    let shifted = PointSet::new(a.matrix().add_scalar(0.3)).unwrap();
    assert!((correspondence_mse(&a, &shifted).unwrap() - 0.09).abs() < 1e-15);

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random_points(40, 3, &mut rng);
    let t = random_points(40, 3, &mut rng);
    let mut acc = 0.0;
    for i in 0..40 {
        for k in 0..3 {
            acc += (x.matrix()[(i, k)] - t.matrix()[(i, k)]).powi(2);
        }
    }
    assert!((correspondence_mse(&x, &t).unwrap() - acc / 40.0).abs() < 1e-12);
    assert!(correspondence_mse(&a, &x).is_err());
}

#[test]
fn icp_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random_points(60, 3, &mut rng);
    let report = icp_baseline(&x, &x, &RegistrationConfig::default()).unwrap();
    assert_eq!(report.iterations, 1);
    let t = report.transform.as_rigid().unwrap();
    assert!((&t.r - DMatrix::<f64>::identity(3, 3)).norm() < 1e-12 && (t.s - 1.0).abs() < 1e-12);

    for (base, deg) in [(fish(), 2.0), (bunny_with(800, 2), 5.0)] {
        let spec = DegradationSpec { rotation_deg: Some(deg), seed: 1, ..DegradationSpec::default() };
        let pair = synth_pair(&spec, &base, TransformKind::Rigid).unwrap();
        let report = icp_baseline(&pair.x, &pair.y, &RegistrationConfig::default()).unwrap();
        let m = evaluate(&report, &pair.truth).unwrap();
        assert!(m.rotation_error.unwrap() < 1e-6, "{deg} degrees: {m:?}");
    }
}

#[test]
fn icp_loses_under_outliers() {
    let mut icp_worse = 0;
    for seed in 0..25u64 {
        let spec = DegradationSpec { outliers: 91, noise: 0.01, seed, ..DegradationSpec::default() };
        let pair = synth_pair(&spec, &fish(), TransformKind::Rigid).unwrap();
        let config = RegistrationConfig { w: 0.5, ..RegistrationConfig::default() };
        let ours = evaluate(&register_rigid(&pair.x, &pair.y, &config).unwrap(), &pair.truth).unwrap();
        let icp = evaluate(&icp_baseline(&pair.x, &pair.y, &config).unwrap(), &pair.truth).unwrap();
        if icp.rotation_error.unwrap() > ours.rotation_error.unwrap() {
            icp_worse += 1;
        }
    }
    assert!(icp_worse >= 20, "{icp_worse} of 25");
}

#[test]
fn benchmark_single_clean_cell() {
    let grid = BenchGrid {
        shape: Shape::Fish,
        kind: TransformKind::Rigid,
        base: DegradationSpec::default(),
        axis: Axis::Noise,
        values: vec![0.0],
        config: RegistrationConfig::default(),
    };
    let report = run_benchmark(&grid, &[Method::Rigid], 1).unwrap();
    let cell = report.cell(0.0, Method::Rigid).unwrap();
    assert!(cell.failures.is_empty());
    assert!(cell.rotation_error.mean.unwrap() < 1e-8);
    assert_eq!(cell.monotonicity_violations, 0);
    assert!(report.table().lines().count() >= 2);
    assert!(!report.series().is_empty());
    assert!(run_benchmark(&grid, &[Method::Rigid], 0).is_err());
}

#[test]
fn benchmark_error_grows_with_noise() {
    let grid = BenchGrid {
        shape: Shape::Fish,
        kind: TransformKind::Rigid,
        base: DegradationSpec { rotation_deg: Some(20.0), ..DegradationSpec::default() },
        axis: Axis::Noise,
        values: vec![0.0, 0.02, 0.05],
        config: RegistrationConfig::default(),
    };
    let methods = [Method::Rigid, Method::Icp];
    let report = run_benchmark(&grid, &methods, 25).unwrap();
    for method in methods {
        let means: Vec<f64> =
            grid.values.iter().map(|v| report.cell(*v, method).unwrap().rotation_error.mean.unwrap()).collect();
        let inversions = means.windows(2).filter(|w| w[1] < w[0]).count();
        assert!(inversions <= 1, "{method:?}: {means:?}");
    }
}

#[test]
fn report_json_round_trip() {
    let spec = DegradationSpec { deform: 0.03, outliers: 10, seed: 2, ..DegradationSpec::default() };
    let pair = synth_pair(&spec, &fish(), TransformKind::Nonrigid).unwrap();
    let config = RegistrationConfig { w: 0.1, ..RegistrationConfig::default() };
    let reports = [
        register_rigid(&pair.x, &pair.y, &config).unwrap(),
        register_affine(&pair.x, &pair.y, &config).unwrap(),
        register_nonrigid(&pair.x, &pair.y, &config).unwrap(),
        icp_baseline(&pair.x, &pair.y, &config).unwrap(),
    ];
    for r in reports {
        let text = r.to_json().unwrap();
        let back = RegistrationReport::from_json(&text).unwrap();
        // NaN never compares equal, so compare the serialized forms.
        assert_eq!(back.to_json().unwrap(), text);
        assert!(max_dev(&back.transform.apply(&pair.y).unwrap(), &r.aligned) < 1e-9);
    }
}

#[test]
fn reports_are_deterministic() {
    let spec = DegradationSpec { deform: 0.03, noise: 0.01, outliers: 30, seed: 6, ..DegradationSpec::default() };
    let pair = synth_pair(&spec, &fish(), TransformKind::Nonrigid).unwrap();
    let config = RegistrationConfig { w: 0.2, ..RegistrationConfig::default() };
    for method in [Method::Rigid, Method::Affine, Method::Nonrigid, Method::Icp] {
        let run = || pointreg::harness::bench::run_method(method, &pair.x, &pair.y, &config).unwrap().without_timings();
        assert_eq!(run().to_json().unwrap(), run().to_json().unwrap(), "{method:?}");
    }
}

#[test]
fn hard_correspondences_on_clean_data() {
    for seed in 0..5u64 {
        let spec = DegradationSpec { rotation_deg: Some(30.0), seed, ..DegradationSpec::default() };
        let pair = synth_pair(&spec, &bunny_with(500, seed), TransformKind::Rigid).unwrap();
        let report = register_rigid(&pair.x, &pair.y, &RegistrationConfig::default()).unwrap();
        assert!(nll_monotone(&report, 1e-9));
        let m = evaluate(&report, &pair.truth).unwrap();
        assert!(m.correct_fraction.unwrap() >= 0.99, "seed {seed}: {m:?}");
    }
}

#[test]
fn variance_never_drops_below_floor() {
    let spec = DegradationSpec { rotation_deg: Some(PI.to_degrees() / 6.0), ..DegradationSpec::default() };
    let pair = synth_pair(&spec, &fish(), TransformKind::Rigid).unwrap();
    let report = register_rigid(&pair.x, &pair.y, &RegistrationConfig::default()).unwrap();
    assert!(report.diagnostics.iterations.iter().all(|it| it.sigma2 >= pointreg::estep::SIGMA2_FLOOR));
}

mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn normalize_round_trips(rows in prop::collection::vec(prop::collection::vec(-1e3f64..1e3, 3), 1..40)) {
            let p = PointSet::from_rows(&rows).unwrap();
            let (q, params, _) = normalize(&p).unwrap();
            let back = params.invert(&q).unwrap();
            prop_assert!(max_dev(&back, &p) <= 1e-12 * p.matrix().abs().max().max(1.0));
        }

        #[test]
        fn text_format_round_trips(vals in prop::collection::vec(any::<f64>().prop_filter("finite", |v| v.is_finite()), 2..40)) {
            let n = vals.len() / 2;
            let p = PointSet::from_row_slice(n, 2, &vals[..2 * n]).unwrap();
            prop_assert_eq!(parse_pointset(&pointreg::harness::io::format_pointset(&p)).unwrap(), p);
        }
    }
}
