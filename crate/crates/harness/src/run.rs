//! Execution of a resolved config: dispatch on the run kind, write the
//! outputs and assemble the manifest.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Instant;

use filippov_core::scenarios::make_smoothed;
use filippov_core::{
    build_double_tangency_explosion, build_grazing_explosion, flow_smooth, grazing_indicator,
    integrate_orbit, run_nondeterministic_ensemble, Branch, BranchSelector, EventKind,
    ExplosionBundle, FlowState, PwsSystem, PwsSystemExt, Selection, Trajectory,
};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::{RunKind, ScenarioConfig};
use crate::error::HarnessError;
use crate::output::{FileEntry, OutputDir};

pub const TOOL: &str = "filippov";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub tool_version: String,
    /// The fully resolved configuration of the run.
    pub config: ScenarioConfig,
    /// Events of every written trajectory, counted by kind.
    pub event_counts: BTreeMap<String, usize>,
    pub wall_clock_seconds: f64,
    pub files: Vec<FileEntry>,
    /// Kind-specific results.
    pub summary: serde_json::Value,
}

impl RunManifest {
    /// The file digests keyed by path; identical inputs give identical maps.
    pub fn digests(&self) -> BTreeMap<String, String> {
        self.files
            .iter()
            .map(|f| (f.path.clone(), f.sha256.clone()))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bracket {
    pub lo: f64,
    pub hi: f64,
    pub indicator_lo: f64,
    pub indicator_hi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanResult {
    pub parameter: String,
    pub critical: f64,
    pub indicator_at_critical: f64,
    /// Every bracket from the initial interval to the final one.
    pub brackets: Vec<Bracket>,
}

/// Runs `config` and writes its outputs to `config.output.dir`, ending with
/// the manifest.
pub fn run(config: &ScenarioConfig) -> Result<RunManifest, HarnessError> {
    let started = Instant::now();
    let config = config.resolved()?;
    let scenario = config.build_scenario()?;
    let sys = scenario.system()?;
    let names = sys.component_names();
    let initial = config
        .initial
        .clone()
        .expect("resolved configs have an initial point");
    let cfg = &config.integrator;
    let format = config.output.format;
    let mut out = OutputDir::create(&config.output.dir)?;
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    let mut count = |traj: &Trajectory| {
        for e in &traj.events {
            *counts.entry(format!("{:?}", e.kind)).or_default() += 1;
        }
    };

    let summary = match config.kind {
        RunKind::Orbit => {
            let start = FlowState::locate(sys.as_ref(), 0.0, &initial, cfg)?;
            let mut selector = BranchSelector::new(&config.policy, 0);
            let traj = integrate_orbit(sys.as_ref(), &start, cfg, &mut selector)?;
            count(&traj);
            out.write_trajectory("trajectory", &names, &traj, format)?;
            json!({
                "samples": traj.samples.len(),
                "final": traj.last(),
                "terminated": traj.events.last().and_then(|e| e.reason),
            })
        }
        RunKind::SmoothedOrbit => {
            let smooth = make_smoothed(Arc::clone(&sys), config.smoothing)?;
            let traj = flow_smooth(&smooth, 0.0, &initial, cfg)?;
            count(&traj);
            out.write_trajectory("trajectory", &names, &traj, format)?;
            json!({
                "samples": traj.samples.len(),
                "final": traj.last(),
                "smoothing": config.smoothing,
            })
        }
        RunKind::BundleGrazing | RunKind::BundleDoubleTangency => {
            let n_tau = config.bundle.n_tau;
            let bundle = if config.kind == RunKind::BundleGrazing {
                build_grazing_explosion(sys.as_ref(), &initial, cfg, n_tau, cfg.t_end)?
            } else {
                build_double_tangency_explosion(sys.as_ref(), &initial, cfg, n_tau, cfg.t_end)?
            };
            count(&bundle.approach);
            bundle.members.iter().for_each(|m| count(&m.trajectory));
            write_bundle(&mut out, &names, &bundle, format)?
        }
        RunKind::Ensemble => {
            let start = FlowState::locate(sys.as_ref(), 0.0, &initial, cfg)?;
            let orbits = run_nondeterministic_ensemble(
                sys.as_ref(),
                &start,
                cfg,
                config.seed,
                config.ensemble.n_orbits,
                config.ensemble.tau_max,
            )?;
            orbits.iter().for_each(&mut count);
            write_ensemble(&mut out, &names, &config, &orbits, format)?
        }
        RunKind::Scan => {
            let s = config.scan.as_ref().expect("checked during resolution");
            let result = scan_grazing(&config, &s.parameter, s.lo, s.hi, s.tol)?;
            out.write_json("scan.json", &result)?;
            json!({
                "parameter": result.parameter,
                "critical": result.critical,
                "indicator_at_critical": result.indicator_at_critical,
                "iterations": result.brackets.len() - 1,
            })
        }
    };

    let manifest = RunManifest {
        tool: TOOL.to_string(),
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        config,
        event_counts: counts,
        wall_clock_seconds: started.elapsed().as_secs_f64(),
        files: out.files().to_vec(),
        summary,
    };
    out.write_json(MANIFEST_FILE, &manifest)?;
    Ok(manifest)
}

fn branch_tag(b: Option<Branch>) -> &'static str {
    match b {
        Some(Branch::Plus) => "plus",
        Some(Branch::Minus) => "minus",
        None => "stick",
    }
}

fn write_bundle(
    out: &mut OutputDir,
    names: &[String],
    bundle: &ExplosionBundle,
    format: crate::config::TrajectoryFormat,
) -> Result<serde_json::Value, HarnessError> {
    out.write_trajectory("approach", names, &bundle.approach, format)?;
    let mut members = Vec::new();
    for (i, m) in bundle.members.iter().enumerate() {
        let stem = format!("members/{i:03}_{}", branch_tag(m.branch));
        let (file, events) = out.write_trajectory(&stem, names, &m.trajectory, format)?;
        members.push(json!({
            "file": file.path,
            "tau": m.tau,
            "branch": m.branch,
            "lineage": "tau grid",
            "events_sha256": events.sha256,
            "endpoint": m.endpoint(),
        }));
    }
    let doc = json!({
        "kind": bundle.kind,
        "t1": bundle.t1,
        "x1": bundle.x1,
        "t_end": bundle.t_end,
        "dtau": bundle.dtau,
        "incoming": bundle.incoming,
        "lambda_limit": bundle.lambda_limit,
        "sliding_end": bundle.sliding_end,
        "members": members,
        "excluded": bundle.excluded,
    });
    out.write_json("bundle.json", &doc)?;
    Ok(json!({
        "kind": bundle.kind,
        "t1": bundle.t1,
        "x1": bundle.x1,
        "members": bundle.members.len(),
        "excluded": bundle.excluded.len(),
    }))
}

fn write_ensemble(
    out: &mut OutputDir,
    names: &[String],
    config: &ScenarioConfig,
    orbits: &[Trajectory],
    format: crate::config::TrajectoryFormat,
) -> Result<serde_json::Value, HarnessError> {
    let mut entries = Vec::new();
    let mut visits = Vec::new();
    for (i, traj) in orbits.iter().enumerate() {
        let (file, events) =
            out.write_trajectory(&format!("orbits/{i:04}"), names, traj, format)?;
        let draws: Vec<(f64, Selection)> = traj
            .events
            .iter()
            .filter_map(|e| e.selection.map(|s| (e.t, s)))
            .collect();
        let n_dt = traj.count(EventKind::DoubleTangency);
        visits.push(n_dt);
        entries.push(json!({
            "index": i,
            "file": file.path,
            "seed": config.seed,
            "stream": i,
            "events_sha256": events.sha256,
            "double_tangency_visits": n_dt,
            "draws": draws.iter().map(|(t, s)| json!({"t": t, "selection": s})).collect::<Vec<_>>(),
            "terminated": traj.events.last().and_then(|e| e.reason),
        }));
    }
    let doc = json!({
        "seed": config.seed,
        "generator": "ChaCha8, seeded from the run seed, one stream per orbit index",
        "tau_distribution": "uniform on [0, min(tau_max, remaining slide)]",
        "branch_distribution": "uniform on {plus, minus}",
        "tau_max": config.ensemble.tau_max,
        "orbits": entries,
    });
    out.write_json("ensemble.json", &doc)?;
    Ok(json!({
        "orbits": orbits.len(),
        "min_double_tangency_visits": visits.iter().min(),
        "max_double_tangency_visits": visits.iter().max(),
    }))
}

/// Signed depth of the first approach to the surface for the scenario of
/// `config` with `parameter` set to `value`: negative if the orbit crosses
/// before turning, zero at a grazing.
pub fn grazing_indicator_at(
    config: &ScenarioConfig,
    parameter: &str,
    value: f64,
) -> Result<f64, HarnessError> {
    let mut c = config.clone();
    c.params.insert(parameter.to_string(), value);
    let scenario = c.build_scenario()?;
    let sys = scenario.system()?;
    let p = c
        .initial
        .clone()
        .unwrap_or_else(|| scenario.default_initial());
    let sigma = sys.sigma_checked(&p)?;
    if sigma.abs() <= c.integrator.tolerances().band(&p) {
        return Err(HarnessError::Config(format!(
            "scan start point {p:?} lies on the switching surface at {parameter} = {value}"
        )));
    }
    let branch = if sigma > 0.0 {
        Branch::Plus
    } else {
        Branch::Minus
    };
    grazing_indicator(sys.as_ref(), &p, branch, &c.integrator)?
        .map(|g| g.signed_min)
        .ok_or_else(|| {
            HarnessError::Scan(format!(
                "orbit does not approach the surface before t = {} at {parameter} = {value}",
                c.integrator.t_end
            ))
        })
}

/// Bisection on the grazing indicator over `[lo, hi]` until the bracket is
/// no wider than `tol`.
pub fn scan_grazing(
    config: &ScenarioConfig,
    parameter: &str,
    lo: f64,
    hi: f64,
    tol: f64,
) -> Result<ScanResult, HarnessError> {
    if !(lo.is_finite() && hi.is_finite()) || lo == hi {
        return Err(HarnessError::Config(format!(
            "scan interval [{lo}, {hi}] is degenerate"
        )));
    }
    if !(tol > 0.0) {
        return Err(HarnessError::Config(format!(
            "scan tolerance must be positive, got {tol}"
        )));
    }
    let (mut lo, mut hi) = (lo.min(hi), lo.max(hi));
    let mut f_lo = grazing_indicator_at(config, parameter, lo)?;
    let mut f_hi = grazing_indicator_at(config, parameter, hi)?;
    if f_lo.signum() == f_hi.signum() && f_lo != 0.0 && f_hi != 0.0 {
        return Err(HarnessError::Scan(format!(
            "no sign change on [{lo}, {hi}]: indicator({lo}) = {f_lo:e}, indicator({hi}) = {f_hi:e}"
        )));
    }
    let mut brackets = vec![Bracket {
        lo,
        hi,
        indicator_lo: f_lo,
        indicator_hi: f_hi,
    }];
    while hi - lo > tol && f_lo != 0.0 && f_hi != 0.0 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        let f_mid = grazing_indicator_at(config, parameter, mid)?;
        if f_mid.signum() == f_lo.signum() {
            lo = mid;
            f_lo = f_mid;
        } else {
            hi = mid;
            f_hi = f_mid;
        }
        brackets.push(Bracket {
            lo,
            hi,
            indicator_lo: f_lo,
            indicator_hi: f_hi,
        });
    }
    let critical = if f_lo == 0.0 {
        lo
    } else if f_hi == 0.0 {
        hi
    } else {
        0.5 * (lo + hi)
    };
    Ok(ScanResult {
        parameter: parameter.to_string(),
        critical,
        indicator_at_critical: grazing_indicator_at(config, parameter, critical)?,
        brackets,
    })
}

/// The system a config describes, with its parameter overrides applied.
pub fn system_of(config: &ScenarioConfig) -> Result<Arc<dyn PwsSystem>, HarnessError> {
    Ok(config.build_scenario()?.system()?)
}
