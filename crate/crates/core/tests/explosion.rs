use filippov_core::scenarios::{make_dbfold, make_mech, MechParams, Parabola};
use filippov_core::{
    build_double_tangency_explosion, build_grazing_explosion, flow_free, hausdorff,
    integrate_orbit, run_nondeterministic_ensemble, Branch, BranchPolicy, BranchSelector,
    EventKind, ExclusionReason, ExplosionKind, FlowState, FnSystem, IntegratorConfig, PwsError,
    PwsSystem, Region,
};

/// Exact flow of the dbfold fields about their foci: `y' = A y` with
/// `y = x - c`, eigenvalues `1/2 ± i sqrt(3)/2`.
fn dbfold_exact(branch: Branch, x0: [f64; 2], s: f64) -> [f64; 2] {
    let (a, c) = match branch {
        Branch::Plus => ([[0.0, 1.0], [-1.0, 1.0]], [1.0, 1.0]),
        Branch::Minus => ([[0.0, -1.0], [1.0, 1.0]], [1.0, -1.0]),
    };
    let w = 3f64.sqrt() / 2.0;
    let (cs, sn, g) = ((w * s).cos(), (w * s).sin() / w, (0.5 * s).exp());
    let m = |i: usize, j: usize| {
        let id = if i == j { 1.0 } else { 0.0 };
        g * (cs * id + sn * (a[i][j] - 0.5 * id))
    };
    let y = [x0[0] - c[0], x0[1] - c[1]];
    [
        c[0] + m(0, 0) * y[0] + m(0, 1) * y[1],
        c[1] + m(1, 0) * y[0] + m(1, 1) * y[1],
    ]
}

fn cfg() -> IntegratorConfig {
    IntegratorConfig::default()
}

#[test]
fn exact_flow_oracle_matches_the_fields() {
    // The oracle itself: finite difference in time against f±.
    let sys = make_dbfold();
    for b in [Branch::Plus, Branch::Minus] {
        let x0 = [-0.7, 0.3];
        let d = 1e-6;
        let (p, m) = (dbfold_exact(b, x0, 0.4 + d), dbfold_exact(b, x0, 0.4 - d));
        let x = dbfold_exact(b, x0, 0.4);
        let mut f = [0.0; 2];
        match b {
            Branch::Plus => sys.f_plus(&x, &mut f),
            Branch::Minus => sys.f_minus(&x, &mut f),
        }
        for i in 0..2 {
            assert!(((p[i] - m[i]) / (2.0 * d) - f[i]).abs() < 1e-7);
        }
    }
}

#[test]
fn dbfold_double_tangency_bundle_matches_closed_form() {
    let sys = make_dbfold();
    let n_tau = 16;
    let b = build_double_tangency_explosion(&sys, &[2.0, 0.0], &cfg(), n_tau, 5.0).unwrap();
    assert_eq!(b.kind, ExplosionKind::DoubleTangency);
    assert!((b.t1 - 2.0).abs() < 1e-9);
    assert!((b.lambda_limit.unwrap() - 0.5).abs() < 1e-12);
    assert_eq!(b.members.len(), 2 * n_tau + 1);
    assert!(b.excluded.is_empty());
    let mut worst: f64 = 0.0;
    for m in &b.members {
        let want = match m.branch {
            Some(br) => dbfold_exact(br, [-m.tau, 0.0], 3.0 - m.tau),
            None => [-3.0, 0.0],
        };
        let got = &m.endpoint().x;
        assert!((m.endpoint().t - b.t_end).abs() < 1e-12);
        worst = worst
            .max((got[0] - want[0]).abs())
            .max((got[1] - want[1]).abs());
    }
    assert!(worst <= 1e-6, "sup error {worst:e}");
}

#[test]
fn zero_tau_members_are_the_single_valued_continuations() {
    let sys = make_dbfold();
    let c = cfg();
    let b = build_double_tangency_explosion(&sys, &[2.0, 0.0], &c, 8, 4.5).unwrap();
    for br in [Branch::Plus, Branch::Minus] {
        let start = FlowState::new(0.0, vec![2.0, 0.0], Region::Sliding);
        let policy = BranchPolicy::Deterministic {
            branch: br,
            tau: 0.0,
        };
        let single = integrate_orbit(
            &sys,
            &start,
            &c.clone().with_t_end(4.5),
            &mut BranchSelector::new(&policy, 0),
        )
        .unwrap();
        let member = b.member(Some(br), 0.0).unwrap();
        let (a, e) = (&single.last().unwrap().x, &member.endpoint().x);
        for (u, v) in a.iter().zip(e.iter()) {
            assert!((u - v).abs() <= 10.0 * c.rel_tol, "{a:?} vs {e:?}");
        }
    }
}

fn convergence_ratios(bundles: &[filippov_core::ExplosionBundle]) -> Vec<f64> {
    let mut out = Vec::new();
    for br in [Branch::Plus, Branch::Minus] {
        let curves: Vec<_> = bundles.iter().map(|b| b.endpoint_curve(br)).collect();
        let d1 = hausdorff(&curves[0], &curves[1]);
        let d2 = hausdorff(&curves[1], &curves[2]);
        out.push(d1 / d2);
    }
    out
}

#[test]
fn dbfold_endpoint_curves_converge_at_first_order() {
    let sys = make_dbfold();
    let bundles: Vec<_> = [16, 32, 64]
        .iter()
        .map(|&n| build_double_tangency_explosion(&sys, &[2.0, 0.0], &cfg(), n, 5.0).unwrap())
        .collect();
    for r in convergence_ratios(&bundles) {
        assert!(r >= 1.8, "ratio {r}");
    }
}

/// A point whose upper orbit grazes the fold line `x = -z` of the oscillator
/// at `(0.5, 0, -0.5)` one time unit later.
fn mech_grazing_start() -> Vec<f64> {
    let m = make_mech(MechParams::default());
    let back = FnSystem::new(
        "mech_reversed",
        3,
        move |x, o| {
            m.f_plus(x, o);
            o.iter_mut().for_each(|v| *v = -*v);
        },
        move |x, o| {
            m.f_minus(x, o);
            o.iter_mut().for_each(|v| *v = -*v);
        },
        |x| x[1],
    );
    let start = FlowState::new(0.0, vec![0.5, 0.0, -0.5], Region::Above);
    let (traj, _) = flow_free(&back, &start, Branch::Plus, &cfg().with_t_end(1.0)).unwrap();
    traj.last().unwrap().x.clone()
}

#[test]
fn mech_grazing_bundle_converges_and_starts_on_the_fold() {
    let sys = make_mech(MechParams::default());
    let p = mech_grazing_start();
    let bundles: Vec<_> = [16, 32, 64]
        .iter()
        .map(|&n| build_grazing_explosion(&sys, &p, &cfg(), n, 2.0).unwrap())
        .collect();
    let b = &bundles[0];
    assert_eq!(b.kind, ExplosionKind::Grazing);
    assert!((b.t1 - 1.0).abs() < 1e-8);
    assert!((b.x1[0] - 0.5).abs() < 1e-7 && (b.x1[2] + 0.5).abs() < 1e-7);
    assert_eq!(b.members.len(), 33);
    for r in convergence_ratios(&bundles) {
        assert!(r >= 1.8, "ratio {r}");
    }
}

#[test]
fn mech_double_tangency_bundle_excludes_the_lower_release_at_the_point() {
    let sys = make_mech(MechParams::default());
    let b = build_double_tangency_explosion(&sys, &[0.5, 0.0, 0.1], &cfg(), 8, 2.5).unwrap();
    assert!((b.t1 - 0.5).abs() < 1e-8);
    // f- is tangent at the origin but curves back up: it cannot depart.
    assert!(b.excluded.iter().any(|e| e.tau == 0.0
        && e.branch == Branch::Minus
        && e.reason == ExclusionReason::NotDeparting));
    assert!(b.member(Some(Branch::Plus), 0.0).is_some());
}

#[test]
fn parabola_grazing_bundle() {
    let sys = Parabola { level: 0.25 };
    let b = build_grazing_explosion(&sys, &Parabola::START, &cfg(), 4, 1.5).unwrap();
    assert_eq!(b.incoming, Some(Branch::Plus));
    assert!((b.t1 - 0.5).abs() < 1e-10);
    assert_eq!(b.members.len(), 9);
    // Upper release at tau = 0 continues the parabola.
    let m = b.member(Some(Branch::Plus), 0.0).unwrap();
    let x = &m.endpoint().x;
    assert!(
        (x[0] - 1.0).abs() < 1e-9 && (x[1] - 1.25).abs() < 1e-9,
        "{x:?}"
    );
    // Lower release at tau = 0 drops with slope -1.
    let m = b.member(Some(Branch::Minus), 0.0).unwrap();
    let x = &m.endpoint().x;
    assert!(
        (x[0] - 1.0).abs() < 1e-9 && (x[1] - (0.25 - 1.0)).abs() < 1e-9,
        "{x:?}"
    );
}

#[test]
fn grazing_bundle_errors() {
    let miss = Parabola { level: 0.2 };
    assert!(matches!(
        build_grazing_explosion(&miss, &Parabola::START, &cfg(), 4, 1.5),
        Err(PwsError::GrazingNotFound { .. })
    ));
    let sys = make_dbfold();
    assert!(matches!(
        build_double_tangency_explosion(&sys, &[-1.0, 1.0], &cfg(), 4, 3.0),
        Err(PwsError::NoDoubleTangency { .. }) | Ok(_)
    ));
    assert!(build_double_tangency_explosion(&sys, &[2.0, 0.0], &cfg(), 0, 3.0).is_err());
}

#[test]
fn ensembles_are_reproducible_and_record_draws() {
    let sys = make_dbfold();
    let start = FlowState::new(0.0, vec![2.0, 0.0], Region::Sliding);
    let c = cfg().with_t_end(100.0);
    let a = run_nondeterministic_ensemble(&sys, &start, &c, 11, 8, 10.0).unwrap();
    let b = run_nondeterministic_ensemble(&sys, &start, &c, 11, 8, 10.0).unwrap();
    assert_eq!(a, b);
    let other = run_nondeterministic_ensemble(&sys, &start, &c, 12, 8, 10.0).unwrap();
    assert_ne!(a, other);
    for traj in &a {
        let draws: Vec<_> = traj
            .events_of(EventKind::DoubleTangency)
            .filter_map(|e| e.selection)
            .collect();
        assert!(draws.len() >= 2);
        assert!(draws.iter().all(|d| (0.0..=d.cap).contains(&d.tau)));
    }
    // Orbits differ from each other.
    assert!(a.windows(2).any(|w| w[0] != w[1]));
}

#[test]
fn dbfold_orbits_keep_returning_with_short_sticking() {
    let sys = make_dbfold();
    let start = FlowState::new(0.0, vec![2.0, 0.0], Region::Sliding);
    let ens =
        run_nondeterministic_ensemble(&sys, &start, &cfg().with_t_end(100.0), 3, 16, 2.0).unwrap();
    for traj in &ens {
        // The first visit is the arrival from (2, 0); the rest are returns.
        assert!(traj.count(EventKind::DoubleTangency) >= 3);
    }
}
