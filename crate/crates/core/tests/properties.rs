use filippov_core::scenarios::{
    make_dbfold, make_mech, make_resonator, MechParams, ResonatorParams,
};
use filippov_core::system::central_difference_gradient;
use filippov_core::{
    classify_surface_point, normal_components, quadratic_tangency_check, sliding_field, Branch,
    FnSystem, PwsSystem, PwsSystemExt, SurfaceRegime, Tolerances,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tol() -> Tolerances {
    Tolerances::default()
}

fn systems() -> Vec<Box<dyn PwsSystem>> {
    vec![
        Box::new(make_resonator(ResonatorParams::default()).unwrap()),
        Box::new(make_dbfold()),
        Box::new(make_mech(MechParams::default())),
    ]
}

/// Puts a point onto the switching surface of the given scenario.
fn on_surface(which: usize, a: f64, b: f64) -> Vec<f64> {
    match which {
        0 => vec![a, b, 1.0],
        1 => vec![a, 0.0],
        _ => vec![a, 0.0, b],
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[test]
fn dbfold_normals_by_hand() {
    let sys = make_dbfold();
    let n = normal_components(&sys, &[1.0, 0.0], &tol()).unwrap();
    assert_eq!((n.h_plus, n.h_minus, n.lambda_s), (-1.0, 1.0, Some(0.5)));
    let n = normal_components(&sys, &[0.0, 0.0], &tol()).unwrap();
    assert_eq!((n.h_plus, n.h_minus, n.lambda_s), (0.0, 0.0, None));
    assert!(sliding_field(&sys, &[0.0, 0.0], &tol()).is_err());
    for x1 in [-3.0, -0.2, 0.7, 5.0] {
        assert_eq!(
            sliding_field(&sys, &[x1, 0.0], &tol()).unwrap(),
            vec![-1.0, 0.0]
        );
    }
}

#[test]
fn dbfold_classification_table() {
    let sys = make_dbfold();
    let c = |x: [f64; 2]| classify_surface_point(&sys, &x, &tol()).unwrap();
    assert_eq!(c([-1.0, 0.0]), SurfaceRegime::RepellingSliding);
    assert_eq!(c([1.0, 0.0]), SurfaceRegime::AttractingSliding);
    assert_eq!(c([0.0, 0.0]), SurfaceRegime::DoubleTangency);
}

#[test]
fn mech_sliding_field_by_hand() {
    let sys = make_mech(MechParams::default());
    // f+ = (-1, -0.5 - 0.1, -1.3), f- = (-1, -0.5 + 1.2, 1) at (0.5, 0, 0.1).
    let lambda = 0.7 / 1.3;
    let want = [-1.0, 0.0, lambda * -1.3 + (1.0 - lambda)];
    let n = normal_components(&sys, &[0.5, 0.0, 0.1], &tol()).unwrap();
    assert!((n.h_plus + 0.6).abs() < 1e-15 && (n.h_minus - 0.7).abs() < 1e-15);
    assert!((n.lambda_s.unwrap() - lambda).abs() < 1e-15);
    let fs = sliding_field(&sys, &[0.5, 0.0, 0.1], &tol()).unwrap();
    for (a, b) in fs.iter().zip(want) {
        assert!((a - b).abs() < 1e-14, "{fs:?}");
    }
}

#[test]
fn dbfold_origin_curvature() {
    let sys = make_dbfold();
    assert_eq!(
        quadratic_tangency_check(&sys, &[0.0, 0.0], Branch::Plus).unwrap(),
        1.0
    );
    assert_eq!(
        quadratic_tangency_check(&sys, &[0.0, 0.0], Branch::Minus).unwrap(),
        -1.0
    );
    // The same values without the analytic shortcut.
    let fd = FnSystem::new(
        "dbfold_fd",
        2,
        |x, o| make_dbfold().f_plus(x, o),
        |x, o| make_dbfold().f_minus(x, o),
        |x| x[1],
    );
    for (b, want) in [(Branch::Plus, 1.0), (Branch::Minus, -1.0)] {
        let v = quadratic_tangency_check(&fd, &[0.0, 0.0], b).unwrap();
        assert!((v - want).abs() < 1e-6, "{v}");
    }
}

#[test]
fn resonator_curvature_matches_finite_differences() {
    let (rp, rm) = (
        make_resonator(ResonatorParams::default()).unwrap(),
        make_resonator(ResonatorParams::default()).unwrap(),
    );
    let fd = FnSystem::new(
        "resonator_fd",
        3,
        move |x, o| rp.f_plus(x, o),
        move |x, o| rm.f_minus(x, o),
        |x| x[2] - 1.0,
    );
    let r = make_resonator(ResonatorParams::default()).unwrap();
    // Points on the upper tangency parabola |B|^2 = 1/s+.
    let radius = r.tangency_power(Branch::Plus).sqrt();
    for k in 0..8 {
        let th = k as f64 * 0.7;
        let x = [radius * th.cos(), radius * th.sin(), 1.0];
        let n = normal_components(&r, &x, &tol()).unwrap();
        assert!(n.h_plus.abs() < 1e-12);
        let exact = quadratic_tangency_check(&r, &x, Branch::Plus).unwrap();
        let approx = quadratic_tangency_check(&fd, &x, Branch::Plus).unwrap();
        assert!(
            (exact - approx).abs() <= 1e-5 * (1.0 + exact.abs()),
            "{exact} vs {approx}"
        );
    }
}

#[test]
fn mech_double_tangency_at_the_origin() {
    let sys = make_mech(MechParams::default());
    let c = classify_surface_point(&sys, &[0.0, 0.0, 0.0], &tol()).unwrap();
    assert_eq!(c, SurfaceRegime::DoubleTangency);
}

#[test]
fn dbfold_landmarks_are_equilibria() {
    let sys = make_dbfold();
    assert_eq!(
        sys.field(Branch::Plus, &[1.0, 1.0]).unwrap(),
        vec![0.0, 0.0]
    );
    assert_eq!(
        sys.field(Branch::Minus, &[1.0, -1.0]).unwrap(),
        vec![0.0, 0.0]
    );
}

#[test]
fn analytic_gradients_match_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for sys in systems() {
        let n = sys.dim();
        for _ in 0..1000 {
            let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let g = sys.grad_sigma_checked(&x).unwrap();
            let mut fd = vec![0.0; n];
            central_difference_gradient(|y| sys.sigma(y), &x, &mut fd);
            let err: f64 = g
                .iter()
                .zip(&fd)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            let scale: f64 = g.iter().map(|v| v.abs()).fold(0.0, f64::max);
            assert!(err <= 1e-5 * scale, "{}: {g:?} vs {fd:?}", sys.name());
        }
    }
}

proptest! {
    #[test]
    fn sliding_field_is_tangent(which in 0usize..3, a in -10.0f64..10.0, b in -10.0f64..10.0) {
        let sys = &systems()[which];
        let x = on_surface(which, a, b);
        let n = normal_components(sys.as_ref(), &x, &tol()).unwrap();
        if n.lambda_s.is_some() {
            let fs = sliding_field(sys.as_ref(), &x, &tol()).unwrap();
            let g = sys.grad_sigma_checked(&x).unwrap();
            let bound = 1e-12 * (n.h_plus.abs() + n.h_minus.abs() + 1.0);
            prop_assert!(dot(&fs, &g).abs() <= bound);
            let lam = n.lambda_s.unwrap();
            prop_assert!((lam * n.h_plus + (1.0 - lam) * n.h_minus).abs() <= bound);
        }
    }

    #[test]
    fn attracting_sliding_has_interior_weight(which in 0usize..3, a in -10.0f64..10.0, b in -10.0f64..10.0) {
        let sys = &systems()[which];
        let x = on_surface(which, a, b);
        if classify_surface_point(sys.as_ref(), &x, &tol()).unwrap() == SurfaceRegime::AttractingSliding {
            let lam = normal_components(sys.as_ref(), &x, &tol()).unwrap().lambda_s.unwrap();
            prop_assert!(lam > 0.0 && lam < 1.0);
        }
    }

    #[test]
    fn dbfold_regimes_mirror(x1 in 1e-6f64..50.0) {
        let sys = make_dbfold();
        let r = classify_surface_point(&sys, &[x1, 0.0], &tol()).unwrap();
        let l = classify_surface_point(&sys, &[-x1, 0.0], &tol()).unwrap();
        prop_assert_eq!(r, SurfaceRegime::AttractingSliding);
        prop_assert_eq!(l, SurfaceRegime::RepellingSliding);
    }

    #[test]
    fn dbfold_fields_mirror(x1 in -10.0f64..10.0, x2 in -10.0f64..10.0) {
        let sys = make_dbfold();
        let p = sys.field(Branch::Plus, &[x1, x2]).unwrap();
        let m = sys.field(Branch::Minus, &[x1, -x2]).unwrap();
        prop_assert_eq!(p[0], m[0]);
        prop_assert_eq!(p[1], -m[1]);
    }

    #[test]
    fn mech_tangency_lines(z in -100.0f64..100.0) {
        let sys = make_mech(MechParams::default());
        let (r1, r2) = sys.tangency_lines();
        let lower = normal_components(&sys, &[r1 * z, 0.0, z], &tol()).unwrap();
        let upper = normal_components(&sys, &[r2 * z, 0.0, z], &tol()).unwrap();
        prop_assert_eq!(lower.h_minus, 0.0);
        prop_assert_eq!(upper.h_plus, 0.0);
    }

    #[test]
    fn resonator_upper_branch_above_threshold(re in -3.0f64..3.0, im in -3.0f64..3.0, dt in 1e-12f64..1.0) {
        let r = make_resonator(ResonatorParams::default()).unwrap();
        let p = *r.params();
        let (lambda, s) = r.coefficients(Branch::Plus);
        prop_assert_eq!((lambda.re, lambda.im, s), (p.lambda_plus_re, p.mu, p.s_plus));
        let x = [re, im, 1.0 + dt];
        prop_assert!(r.sigma(&x) > 0.0);
        let f = r.field(Branch::Plus, &x).unwrap();
        // dB/dt = Lambda+ B - i, dT/dt = (s+ |B|^2 - T) / eps
        let want = [
            p.lambda_plus_re * re - p.mu * im,
            p.mu * re + p.lambda_plus_re * im - 1.0,
            (p.s_plus * (re * re + im * im) - x[2]) / p.eps,
        ];
        for (a, b) in f.iter().zip(want) {
            prop_assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
        }
    }
}
