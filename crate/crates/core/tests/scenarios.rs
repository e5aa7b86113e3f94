use std::sync::Arc;

use filippov_core::scenarios::{
    make_dbfold, make_mech, make_smoothed, MechParams, SigmoidKind, SmoothingParams,
};
use filippov_core::{
    flow_smooth, integrate_orbit, run_nondeterministic_ensemble, Branch, BranchSelector, EventKind,
    FlowState, IntegratorConfig, PwsSystemExt, Region, SmoothSystem, Trajectory,
};

fn bounding_box(trajs: &[Trajectory]) -> (Vec<f64>, Vec<f64>) {
    let n = trajs[0].samples[0].x.len();
    let mut lo = vec![f64::INFINITY; n];
    let mut hi = vec![f64::NEG_INFINITY; n];
    for s in trajs.iter().flat_map(|t| &t.samples) {
        for i in 0..n {
            lo[i] = lo[i].min(s.x[i]);
            hi[i] = hi[i].max(s.x[i]);
        }
    }
    (lo, hi)
}

#[test]
fn steep_sigmoid_saturates_to_the_upper_field() {
    let mech = make_mech(MechParams::default());
    for kind in [SigmoidKind::Tanh, SigmoidKind::Algebraic] {
        let k = match kind {
            SigmoidKind::Tanh => 1000.0,
            // The algebraic sigmoid approaches 1 like 1/(4 k^2 u^2).
            SigmoidKind::Algebraic => 1e5,
        };
        let sm = make_smoothed(Arc::new(mech), SmoothingParams { steepness: k, kind }).unwrap();
        let x = [0.3, 0.1, -0.2];
        let mut g = [0.0; 3];
        sm.rhs(&x, &mut g);
        let f = mech.field(Branch::Plus, &x).unwrap();
        for (a, b) in g.iter().zip(&f) {
            assert!((a - b).abs() < 1e-4, "{g:?} vs {f:?}");
        }
    }
}

#[test]
fn smoothed_field_on_the_surface_is_the_midpoint() {
    let mech = make_mech(MechParams::default());
    let sm = make_smoothed(Arc::new(mech), SmoothingParams::default()).unwrap();
    let x = [0.3, 0.0, -0.2];
    let mut g = [0.0; 3];
    sm.rhs(&x, &mut g);
    let p = mech.field(Branch::Plus, &x).unwrap();
    let m = mech.field(Branch::Minus, &x).unwrap();
    for i in 0..3 {
        assert!((g[i] - 0.5 * (p[i] + m[i])).abs() < 1e-15);
    }
    assert!(make_smoothed(
        Arc::new(mech),
        SmoothingParams {
            steepness: 0.0,
            ..Default::default()
        }
    )
    .is_err());
}

#[test]
fn smoothed_oscillator_stays_inside_the_nonsmooth_attractor() {
    let mech = make_mech(MechParams::default());
    let mut cfg = IntegratorConfig::default().with_t_end(300.0);
    cfg.domain_radius = Some(1e3);
    let start = FlowState::new(0.0, vec![0.5, 0.0, 0.1], Region::Sliding);
    let ens = run_nondeterministic_ensemble(&mech, &start, &cfg, 1, 20, 10.0).unwrap();
    let (lo, hi) = bounding_box(&ens);
    let sm = make_smoothed(Arc::new(mech), SmoothingParams::default()).unwrap();
    let smooth = flow_smooth(&sm, 0.0, &[0.5, 0.0, 0.1], &cfg).unwrap();
    let (slo, shi) = bounding_box(&[smooth]);
    for i in 0..3 {
        assert!(
            lo[i] <= slo[i] && shi[i] <= hi[i],
            "{slo:?} {shi:?} vs {lo:?} {hi:?}"
        );
    }
}

#[test]
fn dbfold_funnels_everything_to_the_origin() {
    let sys = make_dbfold();
    let cfg = IntegratorConfig::default().with_t_end(50.0);
    for i in 0..8 {
        for j in 0..8 {
            let r = 2.0 * (i as f64 + 1.0) / 8.0;
            let th = std::f64::consts::TAU * (j as f64 + 0.5) / 8.0;
            let start =
                FlowState::off_surface(&sys, 0.0, vec![r * th.cos(), r * th.sin()]).unwrap();
            let traj = integrate_orbit(&sys, &start, &cfg, &mut BranchSelector::halting()).unwrap();
            let dt = traj.events_of(EventKind::DoubleTangency).next();
            assert!(dt.is_some_and(|e| e.t < 50.0), "from {:?}", start.x);
        }
    }
}
