//! Set-valued continuation through grazings and double tangencies.
//!
//! At such a point the forward orbit is not unique: it may stick to the
//! surface for any time `tau` and then leave along either field. A bundle
//! enumerates these continuations on a `tau` grid; a branch policy picks one
//! of them per visit for single orbits and ensembles.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{PwsError, Result};
use crate::integrator::{
    detect_grazing, integrate_orbit, project_to_surface, stick, Event, EventKind, FlowState,
    IntegratorConfig, Region, StickStart, Trajectory,
};
use crate::rk::{Rhs, StepSettings, Stepper};
use crate::system::{
    departs, normal_components, quadratic_tangency_check, Branch, PwsSystem, PwsSystemExt,
};

/// How an orbit continues through a non-deterministic point.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum BranchPolicy {
    /// Stop the orbit there with a terminal event.
    #[default]
    Halt,
    /// Always stick for `tau` (or until the slide ends) and leave on `branch`.
    Deterministic { branch: Branch, tau: f64 },
    /// Draw `tau` uniformly on `[0, cap]` and the branch uniformly on `{+, -}`,
    /// where `cap` is the smaller of `tau_max` and the remaining slide.
    UniformRandom {
        seed: u64,
        #[serde(default = "default_tau_max")]
        tau_max: f64,
    },
    /// Enumerate a `tau` grid. Only meaningful for bundles; single orbits halt.
    EnumerateGrid { n_tau: usize },
}

fn default_tau_max() -> f64 {
    10.0
}

/// A continuation picked by a selector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Choice {
    pub tau: f64,
    pub branch: Branch,
}

/// Per-orbit state of a [`BranchPolicy`].
///
/// Random selectors draw from a ChaCha stream keyed by the orbit index, so
/// each orbit's draws depend only on the master seed and its index.
#[derive(Debug, Clone)]
pub struct BranchSelector {
    policy: BranchPolicy,
    rng: Option<ChaCha8Rng>,
}

impl BranchSelector {
    pub fn new(policy: &BranchPolicy, orbit_index: u64) -> Self {
        let rng = match policy {
            BranchPolicy::UniformRandom { seed, .. } => {
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                rng.set_stream(orbit_index);
                Some(rng)
            }
            _ => None,
        };
        BranchSelector {
            policy: policy.clone(),
            rng,
        }
    }

    pub fn halting() -> Self {
        BranchSelector::new(&BranchPolicy::Halt, 0)
    }

    pub fn policy(&self) -> &BranchPolicy {
        &self.policy
    }

    /// Longest sticking time this selector may ask for; `None` if it halts.
    pub(crate) fn tau_horizon(&self) -> Option<f64> {
        match self.policy {
            BranchPolicy::Halt | BranchPolicy::EnumerateGrid { .. } => None,
            BranchPolicy::Deterministic { tau, .. } => Some(tau.max(0.0)),
            BranchPolicy::UniformRandom { tau_max, .. } => Some(tau_max.max(0.0)),
        }
    }

    pub(crate) fn choose(&mut self, cap: f64) -> Option<Choice> {
        match self.policy {
            BranchPolicy::Halt | BranchPolicy::EnumerateGrid { .. } => None,
            BranchPolicy::Deterministic { branch, tau } => Some(Choice {
                tau: tau.min(cap),
                branch,
            }),
            BranchPolicy::UniformRandom { .. } => {
                let rng = self.rng.as_mut().expect("random policy has a generator");
                let u: f64 = rng.gen();
                let plus: bool = rng.gen();
                Some(Choice {
                    tau: u * cap,
                    branch: if plus { Branch::Plus } else { Branch::Minus },
                })
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExplosionKind {
    Grazing,
    DoubleTangency,
}

/// One continuation: stick for `tau`, then follow `branch`. A member with
/// `branch == None` sticks for the whole window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleMember {
    pub tau: f64,
    pub branch: Option<Branch>,
    pub trajectory: Trajectory,
}

impl BundleMember {
    pub fn endpoint(&self) -> &FlowState {
        self.trajectory
            .last()
            .expect("member trajectories are never empty")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExclusionReason {
    /// The released field would not leave the surface.
    NotDeparting,
    /// The slide had already ended before `tau`.
    BeyondSlidingExit,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Exclusion {
    pub tau: f64,
    pub branch: Branch,
    pub reason: ExclusionReason,
}

/// The family of forward continuations from one non-deterministic point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplosionBundle {
    pub kind: ExplosionKind,
    pub t1: f64,
    pub x1: Vec<f64>,
    pub t_end: f64,
    /// Grid spacing of the sticking times.
    pub dtau: f64,
    /// Branch of the grazing orbit, for grazing bundles.
    pub incoming: Option<Branch>,
    /// Limit of `lambda_s` along the incoming slide, for double tangencies.
    pub lambda_limit: Option<f64>,
    /// Orbit from the start point up to `t1`.
    pub approach: Trajectory,
    /// How the sticking orbit ended: `Terminate` at `t_end`, or an earlier
    /// `SlideExit` / `DoubleTangency` that truncates the admissible `tau`.
    pub sliding_end: Event,
    pub members: Vec<BundleMember>,
    pub excluded: Vec<Exclusion>,
}

impl ExplosionBundle {
    /// Member endpoints released on `branch`, ordered by `tau`, followed by
    /// the full-stick endpoint.
    pub fn endpoint_curve(&self, branch: Branch) -> Vec<Vec<f64>> {
        let mut pts: Vec<(f64, Vec<f64>)> = self
            .members
            .iter()
            .filter(|m| m.branch == Some(branch))
            .map(|m| (m.tau, m.endpoint().x.clone()))
            .collect();
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut out: Vec<Vec<f64>> = pts.into_iter().map(|p| p.1).collect();
        if let Some(full) = self.members.iter().find(|m| m.branch.is_none()) {
            out.push(full.endpoint().x.clone());
        }
        out
    }

    pub fn member(&self, branch: Option<Branch>, tau: f64) -> Option<&BundleMember> {
        self.members
            .iter()
            .find(|m| m.branch == branch && (m.tau - tau).abs() <= 1e-12 * (1.0 + tau.abs()))
    }
}

/// Hausdorff distance between two finite point sets (max norm).
pub fn hausdorff(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    fn directed(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
        a.iter()
            .map(|p| {
                b.iter()
                    .map(|q| {
                        p.iter()
                            .zip(q)
                            .map(|(x, y)| (x - y).abs())
                            .fold(0.0, f64::max)
                    })
                    .fold(f64::INFINITY, f64::min)
            })
            .fold(0.0, f64::max)
    }
    directed(a, b).max(directed(b, a))
}

/// Bundle from the grazing of the orbit of `p`: it follows the field of its
/// own side to the tangency at `t1`, then sticks to the adjoining repelling
/// sliding region for `tau` before leaving on either field.
pub fn build_grazing_explosion(
    sys: &(impl PwsSystem + ?Sized),
    p: &[f64],
    cfg: &IntegratorConfig,
    n_tau: usize,
    t_end: f64,
) -> Result<ExplosionBundle> {
    cfg.validate()?;
    let incoming = if sys.sigma_checked(p)? >= 0.0 {
        Branch::Plus
    } else {
        Branch::Minus
    };
    let (t1, x1) = detect_grazing(sys, p, incoming, cfg)?
        .ok_or_else(|| PwsError::GrazingNotFound { p: p.to_vec() })?;
    let curvature = quadratic_tangency_check(sys, &x1, incoming)?;
    let normals = normal_components(sys, &x1, &cfg.tolerances())?;
    if curvature.abs() <= normals.tangency_eps(&cfg.tolerances()) {
        return Err(PwsError::NotQuadratic {
            x: x1,
            value: curvature,
        });
    }
    let approach = branch_flow(sys, incoming, p, t1, cfg)?;
    let x1 = project_to_surface(sys, &x1)?;
    assemble(
        sys,
        ExplosionKind::Grazing,
        t1,
        x1,
        StickStart::Fold { incoming },
        Some(incoming),
        None,
        approach,
        cfg,
        n_tau,
        t_end,
    )
}

/// Bundle from the double tangency reached by the orbit of `p` through
/// sliding: sticking continues through the tangency point along the limit
/// of the incoming sliding field, then into the region beyond.
pub fn build_double_tangency_explosion(
    sys: &(impl PwsSystem + ?Sized),
    p: &[f64],
    cfg: &IntegratorConfig,
    n_tau: usize,
    t_end: f64,
) -> Result<ExplosionBundle> {
    cfg.validate()?;
    let initial = FlowState::locate(sys, 0.0, p, cfg)?;
    let mut approach_cfg = cfg.clone();
    approach_cfg.t_end = t_end;
    let approach = integrate_orbit(sys, &initial, &approach_cfg, &mut BranchSelector::halting())?;
    let dt_event = approach
        .events
        .iter()
        .find(|e| e.kind == EventKind::DoubleTangency && e.lambda_limit.is_some())
        .cloned();
    let Some(dt_event) = dt_event else {
        let ended = approach
            .events
            .last()
            .map(|e| format!("{:?} at t = {}", e.kind, e.t))
            .unwrap_or_else(|| "no events".into());
        return Err(PwsError::NoDoubleTangency {
            p: p.to_vec(),
            ended,
        });
    };
    let mut approach = approach;
    approach
        .events
        .retain(|e| e.t <= dt_event.t && e.kind != EventKind::Terminate);
    let lambda_limit = dt_event.lambda_limit.expect("checked above");
    assemble(
        sys,
        ExplosionKind::DoubleTangency,
        dt_event.t,
        dt_event.x.clone(),
        StickStart::DoubleTangency { lambda_limit },
        None,
        Some(lambda_limit),
        approach,
        cfg,
        n_tau,
        t_end,
    )
}

/// Orbit of one field from `p` over `[0, t1]`, ignoring the surface.
fn branch_flow(
    sys: &(impl PwsSystem + ?Sized),
    branch: Branch,
    p: &[f64],
    t1: f64,
    cfg: &IntegratorConfig,
) -> Result<Trajectory> {
    let region = Region::of(branch);
    let mut traj = Trajectory::new();
    traj.push_sample(FlowState::new(0.0, p.to_vec(), region));
    let rhs = |x: &[f64], out: &mut [f64]| sys.field_into(branch, x, out);
    let rhs: &Rhs = &rhs;
    let settings = StepSettings {
        rel_tol: cfg.rel_tol,
        abs_tol: cfg.abs_tol,
        max_step: cfg.max_step,
    };
    let mut stepper = Stepper::new(rhs, 0.0, p.to_vec(), settings)?;
    while stepper.t < t1 {
        let step = stepper.step(t1)?;
        traj.push_sample(FlowState::new(step.t1(), step.y1, region));
    }
    Ok(traj)
}

enum Outcome {
    Member(BundleMember),
    Excluded(Exclusion),
}

#[allow(clippy::too_many_arguments)]
fn assemble(
    sys: &(impl PwsSystem + ?Sized),
    kind: ExplosionKind,
    t1: f64,
    x1: Vec<f64>,
    start: StickStart,
    incoming: Option<Branch>,
    lambda_limit: Option<f64>,
    approach: Trajectory,
    cfg: &IntegratorConfig,
    n_tau: usize,
    t_end: f64,
) -> Result<ExplosionBundle> {
    if n_tau == 0 {
        return Err(PwsError::InvalidConfig("n_tau must be at least 1".into()));
    }
    if !(t_end > t1) {
        return Err(PwsError::InvalidConfig(format!(
            "bundle horizon {t_end} does not extend past the event time {t1}"
        )));
    }
    let mut cfg = cfg.clone();
    cfg.t_end = t_end;
    let tol = cfg.tolerances();
    let stuck = stick(sys, t1, &x1, &start, t_end, &cfg)?;
    let available = stuck.dense.t_stop - t1;
    let dtau = (t_end - t1) / n_tau as f64;

    let mut tasks: Vec<(usize, Option<Branch>)> = Vec::with_capacity(2 * n_tau + 1);
    for k in 0..n_tau {
        tasks.push((k, Some(Branch::Plus)));
        tasks.push((k, Some(Branch::Minus)));
    }
    tasks.push((n_tau, None));

    let outcomes: Vec<Outcome> = tasks
        .par_iter()
        .map(|&(k, branch)| -> Result<Outcome> {
            let tau = if branch.is_none() {
                available
            } else {
                k as f64 * dtau
            };
            let mut traj = stuck.trajectory.clone();
            traj.events.clear();
            let Some(branch) = branch else {
                // Full stick: follow the slide to its end and beyond.
                traj.events.push(stuck.end.clone());
                if stuck.end.kind == EventKind::SlideExit {
                    let b = stuck.end.branch.expect("exit carries its branch");
                    let from = FlowState::new(stuck.end.t, stuck.end.x.clone(), Region::of(b));
                    traj.append(integrate_orbit(
                        sys,
                        &from,
                        &cfg,
                        &mut BranchSelector::halting(),
                    )?);
                }
                return Ok(Outcome::Member(BundleMember {
                    tau,
                    branch: None,
                    trajectory: traj,
                }));
            };
            if tau > available + 1e-12 * (1.0 + available) {
                return Ok(Outcome::Excluded(Exclusion {
                    tau,
                    branch,
                    reason: ExclusionReason::BeyondSlidingExit,
                }));
            }
            let t_rel = t1 + tau;
            let x_rel = if tau > 0.0 {
                project_to_surface(sys, &stuck.dense.eval(t_rel))?
            } else {
                x1.clone()
            };
            let normals = normal_components(sys, &x_rel, &tol)?;
            if !departs(sys, &normals, branch, &tol)? {
                return Ok(Outcome::Excluded(Exclusion {
                    tau,
                    branch,
                    reason: ExclusionReason::NotDeparting,
                }));
            }
            traj.samples.retain(|s| s.t <= t_rel);
            traj.push_sample(FlowState::new(t_rel, x_rel.clone(), Region::Sliding));
            let mut exit = Event::new(EventKind::SlideExit, t_rel, x_rel.clone());
            exit.branch = Some(branch);
            exit.normals = Some((&normals).into());
            traj.events.push(exit);
            let from = FlowState::new(t_rel, x_rel, Region::of(branch));
            traj.append(integrate_orbit(
                sys,
                &from,
                &cfg,
                &mut BranchSelector::halting(),
            )?);
            Ok(Outcome::Member(BundleMember {
                tau,
                branch: Some(branch),
                trajectory: traj,
            }))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut members = Vec::new();
    let mut excluded = Vec::new();
    for o in outcomes {
        match o {
            Outcome::Member(m) => members.push(m),
            Outcome::Excluded(e) => excluded.push(e),
        }
    }
    Ok(ExplosionBundle {
        kind,
        t1,
        x1,
        t_end,
        dtau,
        incoming,
        lambda_limit,
        approach,
        sliding_end: stuck.end,
        members,
        excluded,
    })
}

/// Integrates `n_orbits` orbits from `initial`, each drawing its own sticking
/// times and exit branches at every non-deterministic point from a stream
/// split off `seed` by orbit index. Orbits run in parallel; results do not
/// depend on scheduling.
pub fn run_nondeterministic_ensemble(
    sys: &(impl PwsSystem + ?Sized),
    initial: &FlowState,
    cfg: &IntegratorConfig,
    seed: u64,
    n_orbits: usize,
    tau_max: f64,
) -> Result<Vec<Trajectory>> {
    cfg.validate()?;
    let policy = BranchPolicy::UniformRandom { seed, tau_max };
    (0..n_orbits)
        .into_par_iter()
        .map(|i| {
            let mut selector = BranchSelector::new(&policy, i as u64);
            integrate_orbit(sys, initial, cfg, &mut selector).map_err(|e| PwsError::Orbit {
                index: i,
                source: Box::new(e),
            })
        })
        .collect()
}
