//! Event-located integration of single orbits.
//!
//! An orbit is a concatenation of three kinds of segment: free flight under
//! `f+` or `f-`, motion along the surface under the sliding field, and the
//! instantaneous transitions between them. Free flight stops where `sigma`
//! changes sign; sliding stops where either normal component changes sign.

use std::cell::Cell;

use serde::{Deserialize, Serialize};

use crate::error::{PwsError, Result};
use crate::explosion::{BranchSelector, Choice};
use crate::rk::{locate_root, Rhs, StepRecord, StepSettings, Stepper};
use crate::system::{
    classify_normals, departs, dot, surface_eval, Branch, NormalData, PwsSystem, PwsSystemExt,
    SurfaceRegime, Tolerances,
};

/// Where a state lives relative to the switching surface.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Region {
    Above,
    Below,
    Sliding,
}

impl Region {
    pub fn of(branch: Branch) -> Region {
        match branch {
            Branch::Plus => Region::Above,
            Branch::Minus => Region::Below,
        }
    }

    pub fn branch(self) -> Option<Branch> {
        match self {
            Region::Above => Some(Branch::Plus),
            Region::Below => Some(Branch::Minus),
            Region::Sliding => None,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            Region::Above => "above",
            Region::Below => "below",
            Region::Sliding => "sliding",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Region> {
        match tag {
            "above" => Some(Region::Above),
            "below" => Some(Region::Below),
            "sliding" => Some(Region::Sliding),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowState {
    pub t: f64,
    pub x: Vec<f64>,
    pub region: Region,
}

impl FlowState {
    pub fn new(t: f64, x: Vec<f64>, region: Region) -> Self {
        FlowState { t, x, region }
    }

    /// A state off the surface, with the region taken from the sign of sigma.
    pub fn off_surface(sys: &(impl PwsSystem + ?Sized), t: f64, x: Vec<f64>) -> Result<Self> {
        let s = sys.sigma_checked(&x)?;
        let region = if s >= 0.0 {
            Region::Above
        } else {
            Region::Below
        };
        Ok(FlowState { t, x, region })
    }

    /// A state at `x`: sliding (projected onto the surface) when `x` lies in
    /// the surface band, otherwise on the side given by the sign of sigma.
    pub fn locate(
        sys: &(impl PwsSystem + ?Sized),
        t: f64,
        x: &[f64],
        cfg: &IntegratorConfig,
    ) -> Result<Self> {
        let sigma = sys.sigma_checked(x)?;
        if sigma.abs() <= cfg.tolerances().band(x) {
            Ok(FlowState::new(
                t,
                project_to_surface(sys, x)?,
                Region::Sliding,
            ))
        } else {
            FlowState::off_surface(sys, t, x.to_vec())
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EventKind {
    SurfaceHit,
    Cross,
    SlideEnter,
    SlideExit,
    Graze,
    DoubleTangency,
    Terminate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminateReason {
    Horizon,
    Escaped,
    /// The branch policy declined to continue through a non-deterministic point.
    Halted,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EventNormals {
    pub h_plus: f64,
    pub h_minus: f64,
    pub lambda_s: Option<f64>,
}

impl From<&NormalData> for EventNormals {
    fn from(n: &NormalData) -> Self {
        EventNormals {
            h_plus: n.h_plus,
            h_minus: n.h_minus,
            lambda_s: n.lambda_s,
        }
    }
}

/// The continuation picked at a non-deterministic point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    /// Sticking time before release.
    pub tau: f64,
    /// Branch the orbit left on; `None` if it stuck until its slide ended.
    pub branch: Option<Branch>,
    /// Longest sticking time that was available.
    pub cap: f64,
    /// The drawn branch could not depart and the other one was used.
    pub substituted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub kind: EventKind,
    pub t: f64,
    pub x: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub regime: Option<SurfaceRegime>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub normals: Option<EventNormals>,
    /// Arriving branch for hits and folds, departing branch for exits and
    /// crossings.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub branch: Option<Branch>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub lambda_limit: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub selection: Option<Selection>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub reason: Option<TerminateReason>,
}

impl Event {
    pub fn new(kind: EventKind, t: f64, x: Vec<f64>) -> Self {
        Event {
            kind,
            t,
            x,
            regime: None,
            normals: None,
            branch: None,
            lambda_limit: None,
            selection: None,
            reason: None,
        }
    }

    fn with_normals(mut self, n: &NormalData, tol: &Tolerances) -> Self {
        self.regime = Some(classify_normals(n, tol));
        self.normals = Some(n.into());
        self
    }

    fn with_branch(mut self, b: Branch) -> Self {
        self.branch = Some(b);
        self
    }

    fn terminate(t: f64, x: Vec<f64>, reason: TerminateReason) -> Self {
        let mut e = Event::new(EventKind::Terminate, t, x);
        e.reason = Some(reason);
        e
    }
}

/// Time-ordered samples of one orbit plus its event log.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub samples: Vec<FlowState>,
    pub events: Vec<Event>,
}

impl Trajectory {
    pub fn new() -> Self {
        Trajectory::default()
    }

    /// Appends a sample; samples not strictly after the last one are dropped.
    pub fn push_sample(&mut self, s: FlowState) {
        match self.samples.last() {
            Some(last) if s.t <= last.t => {}
            _ => self.samples.push(s),
        }
    }

    pub fn append(&mut self, other: Trajectory) {
        for s in other.samples {
            self.push_sample(s);
        }
        self.events.extend(other.events);
    }

    pub fn last(&self) -> Option<&FlowState> {
        self.samples.last()
    }

    pub fn count(&self, kind: EventKind) -> usize {
        self.events.iter().filter(|e| e.kind == kind).count()
    }

    pub fn events_of(&self, kind: EventKind) -> impl Iterator<Item = &Event> + '_ {
        self.events.iter().filter(move |e| e.kind == kind)
    }

    /// Drops samples after `t`.
    fn truncate_after(&mut self, t: f64) {
        self.samples.retain(|s| s.t <= t);
    }
}

/// Step-size control, tolerances and horizon for one integration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IntegratorConfig {
    pub rel_tol: f64,
    pub abs_tol: f64,
    /// Relative surface band: on-surface iff `|sigma| <= surface_band * (1 + |x|)`.
    pub surface_band: f64,
    /// Time accuracy of located events.
    pub event_root_tol: f64,
    pub max_step: f64,
    pub t_end: f64,
    /// Sliding states are projected back when `|sigma|` exceeds this.
    pub sliding_projection_tol: f64,
    pub tangency_tol: f64,
    pub degeneracy_tol: f64,
    /// Uniform output grid; `None` records every accepted step.
    pub sample_interval: Option<f64>,
    /// Duration of the linear step taken through a double tangency.
    pub pass_through_step: f64,
    pub max_events: usize,
    /// Orbits leaving the ball `|x|_inf <= domain_radius` are truncated.
    pub domain_radius: Option<f64>,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        IntegratorConfig {
            rel_tol: 1e-10,
            abs_tol: 1e-12,
            surface_band: 1e-8,
            event_root_tol: 1e-10,
            max_step: 0.1,
            t_end: 50.0,
            sliding_projection_tol: 1e-12,
            tangency_tol: 1e-9,
            degeneracy_tol: 1e-12,
            sample_interval: None,
            pass_through_step: 1e-7,
            max_events: 1_000_000,
            domain_radius: None,
        }
    }
}

impl IntegratorConfig {
    pub fn with_t_end(mut self, t_end: f64) -> Self {
        self.t_end = t_end;
        self
    }

    pub fn tolerances(&self) -> Tolerances {
        Tolerances {
            tangency: self.tangency_tol,
            degeneracy: self.degeneracy_tol,
            surface_band: self.surface_band,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("rel_tol", self.rel_tol),
            ("abs_tol", self.abs_tol),
            ("surface_band", self.surface_band),
            ("event_root_tol", self.event_root_tol),
            ("max_step", self.max_step),
            ("sliding_projection_tol", self.sliding_projection_tol),
            ("tangency_tol", self.tangency_tol),
            ("degeneracy_tol", self.degeneracy_tol),
            ("pass_through_step", self.pass_through_step),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(PwsError::InvalidConfig(format!(
                    "{name} must be positive and finite, got {v}"
                )));
            }
        }
        if !(self.t_end >= 0.0 && self.t_end.is_finite()) {
            return Err(PwsError::InvalidConfig(format!(
                "t_end must be non-negative and finite, got {}",
                self.t_end
            )));
        }
        if self.event_root_tol >= self.max_step {
            return Err(PwsError::InvalidConfig(
                "event_root_tol must be smaller than max_step".into(),
            ));
        }
        if let Some(dt) = self.sample_interval {
            if !(dt > 0.0 && dt.is_finite()) {
                return Err(PwsError::InvalidConfig(format!(
                    "sample_interval must be positive, got {dt}"
                )));
            }
        }
        if let Some(r) = self.domain_radius {
            if !(r > 0.0) {
                return Err(PwsError::InvalidConfig(format!(
                    "domain_radius must be positive, got {r}"
                )));
            }
        }
        Ok(())
    }

    fn step_settings(&self) -> StepSettings {
        StepSettings {
            rel_tol: self.rel_tol,
            abs_tol: self.abs_tol,
            max_step: self.max_step,
        }
    }
}

/// Emits samples either at accepted step ends or on a uniform time grid.
struct Sampler {
    interval: Option<f64>,
    next: u64,
}

impl Sampler {
    fn new(interval: Option<f64>, t0: f64) -> Self {
        let next = match interval {
            Some(dt) => (t0 / dt).floor().max(0.0) as u64 + 1,
            None => 0,
        };
        Sampler { interval, next }
    }

    fn emit(&mut self, step: &StepRecord, upto: f64, region: Region, traj: &mut Trajectory) {
        match self.interval {
            None => {
                if upto >= step.t1() {
                    traj.push_sample(FlowState::new(step.t1(), step.y1.clone(), region));
                }
            }
            Some(dt) => loop {
                let t = self.next as f64 * dt;
                if t > upto {
                    break;
                }
                if t >= step.t0 {
                    traj.push_sample(FlowState::new(t, step.eval(t), region));
                }
                self.next += 1;
            },
        }
    }
}

fn escaped(cfg: &IntegratorConfig, x: &[f64]) -> bool {
    match cfg.domain_radius {
        Some(r) => x.iter().any(|v| v.abs() > r),
        None => false,
    }
}

/// Integrates `f+` or `f-` from `state` until the orbit reaches the surface
/// (a `SurfaceHit`) or the horizon (`Terminate`).
///
/// A state starting on the surface band may leave it; the hit detector arms
/// only once the orbit is more than two bands away.
pub fn flow_free(
    sys: &(impl PwsSystem + ?Sized),
    state: &FlowState,
    branch: Branch,
    cfg: &IntegratorConfig,
) -> Result<(Trajectory, Event)> {
    let tol = cfg.tolerances();
    let s = branch.sign();
    let region = Region::of(branch);
    let g = |x: &[f64]| -> Result<f64> { Ok(s * sys.sigma_checked(x)?) };

    let g0 = g(&state.x)?;
    if g0 < -2.0 * tol.band(&state.x) {
        return Err(PwsError::InvalidConfig(format!(
            "state at t = {} is on the wrong side of the surface for branch {branch}",
            state.t
        )));
    }
    let mut traj = Trajectory::new();
    traj.push_sample(FlowState::new(state.t, state.x.clone(), region));
    if state.t >= cfg.t_end {
        let e = Event::terminate(state.t, state.x.clone(), TerminateReason::Horizon);
        return Ok((traj, e));
    }

    let rhs = |x: &[f64], out: &mut [f64]| sys.field_into(branch, x, out);
    let rhs: &Rhs = &rhs;
    let mut stepper = Stepper::new(rhs, state.t, state.x.clone(), cfg.step_settings())?;
    let mut sampler = Sampler::new(cfg.sample_interval, state.t);
    let mut armed = g0 > 2.0 * tol.band(&state.x);
    let mut g_prev = g0;

    loop {
        let step = stepper.step(cfg.t_end)?;
        let g1 = g(&step.y1)?;
        let band1 = tol.band(&step.y1);
        let crossed = if armed {
            g1 <= 0.0
        } else if g1 > 2.0 * band1 {
            armed = true;
            false
        } else {
            // Never left the band, and now heading into the wrong half-space.
            g1 < -2.0 * band1
        };
        if crossed {
            let (t, x, _) = if g_prev > 0.0 {
                locate_root(
                    &step,
                    &g,
                    (step.t0, g_prev),
                    (step.t1(), g1),
                    cfg.event_root_tol,
                )?
            } else {
                (step.t0, step.y0.clone(), g_prev)
            };
            sampler.emit(&step, t, region, &mut traj);
            traj.push_sample(FlowState::new(t, x.clone(), region));
            let normals = surface_eval(sys, &x, &tol)?.normals;
            let e = Event::new(EventKind::SurfaceHit, t, x)
                .with_normals(&normals, &tol)
                .with_branch(branch);
            return Ok((traj, e));
        }
        sampler.emit(&step, step.t1(), region, &mut traj);
        if escaped(cfg, &step.y1) {
            traj.push_sample(FlowState::new(step.t1(), step.y1.clone(), region));
            let e = Event::terminate(step.t1(), step.y1.clone(), TerminateReason::Escaped);
            return Ok((traj, e));
        }
        if stepper.t >= cfg.t_end {
            traj.push_sample(FlowState::new(stepper.t, stepper.y.clone(), region));
            let e = Event::terminate(stepper.t, stepper.y.clone(), TerminateReason::Horizon);
            return Ok((traj, e));
        }
        g_prev = g1;
    }
}

/// What happens to an orbit that has just reached the surface.
#[derive(Debug, Clone, PartialEq)]
pub enum SurfaceStep {
    /// The orbit continues deterministically (crossing or sliding).
    Continue { state: FlowState, event: Event },
    /// The incoming field is tangent (`Graze`) or both fields are tangent
    /// (`DoubleTangency`): forward evolution is set-valued and a branch
    /// policy must choose.
    NonDeterministic { event: Event },
}

/// Classifies a surface hit and resolves the deterministic cases.
///
/// Crossing flips the region; attracting sliding enters the surface. A hit
/// where the arriving field is tangent becomes a `Graze`, and a hit at a
/// double tangency a `DoubleTangency`; both are handed back for the branch
/// policy to resolve.
pub fn step_surface(
    sys: &(impl PwsSystem + ?Sized),
    hit: &Event,
    cfg: &IntegratorConfig,
) -> Result<SurfaceStep> {
    let tol = cfg.tolerances();
    let incoming = hit
        .branch
        .ok_or_else(|| PwsError::InvalidConfig("surface hit without an arriving branch".into()))?;
    let x = hit.x.clone();
    let normals = surface_eval(sys, &x, &tol)?.normals;
    let regime = classify_normals(&normals, &tol);
    let unclassifiable = |reason| PwsError::Unclassifiable {
        x: x.clone(),
        h_plus: normals.h_plus,
        h_minus: normals.h_minus,
        reason,
    };
    let cross = |to: Branch| SurfaceStep::Continue {
        state: FlowState::new(hit.t, x.clone(), Region::of(to)),
        event: Event::new(EventKind::Cross, hit.t, x.clone())
            .with_normals(&normals, &tol)
            .with_branch(to),
    };
    let slide = || -> Result<SurfaceStep> {
        let xs = project_to_surface(sys, &x)?;
        Ok(SurfaceStep::Continue {
            state: FlowState::new(hit.t, xs.clone(), Region::Sliding),
            event: Event::new(EventKind::SlideEnter, hit.t, xs).with_normals(&normals, &tol),
        })
    };
    let arriving = -incoming.sign() * normals.h(incoming) > 0.0;
    match regime {
        SurfaceRegime::Crossing => {
            if !arriving {
                return Err(unclassifiable("arrival against the incoming field"));
            }
            Ok(cross(incoming.other()))
        }
        SurfaceRegime::AttractingSliding => slide(),
        SurfaceRegime::RepellingSliding => {
            Err(unclassifiable("transversal arrival into repelling sliding"))
        }
        SurfaceRegime::TangencyPlus | SurfaceRegime::TangencyMinus => {
            let tangent = if regime == SurfaceRegime::TangencyPlus {
                Branch::Plus
            } else {
                Branch::Minus
            };
            if tangent == incoming {
                let e = Event::new(EventKind::Graze, hit.t, x.clone())
                    .with_normals(&normals, &tol)
                    .with_branch(incoming);
                return Ok(SurfaceStep::NonDeterministic { event: e });
            }
            // Transversal arrival at a fold of the far field.
            if departs(sys, &normals, tangent, &tol)? {
                Ok(cross(tangent))
            } else {
                slide()
            }
        }
        SurfaceRegime::DoubleTangency => {
            let e = Event::new(EventKind::DoubleTangency, hit.t, x.clone())
                .with_normals(&normals, &tol)
                .with_branch(incoming);
            Ok(SurfaceStep::NonDeterministic { event: e })
        }
    }
}

/// Newton step along the gradient onto `sigma = 0`.
pub(crate) fn project_to_surface(sys: &(impl PwsSystem + ?Sized), x: &[f64]) -> Result<Vec<f64>> {
    let mut y = x.to_vec();
    for _ in 0..3 {
        let s = sys.sigma_checked(&y)?;
        if s == 0.0 {
            break;
        }
        let g = sys.grad_sigma_checked(&y)?;
        let g2 = dot(&g, &g);
        if g2 == 0.0 {
            break;
        }
        for (yi, gi) in y.iter_mut().zip(&g) {
            *yi -= s * gi / g2;
        }
    }
    Ok(y)
}

/// Piecewise dense representation of a sliding orbit.
#[derive(Debug, Clone)]
pub(crate) enum DensePiece {
    Linear {
        t0: f64,
        t1: f64,
        x0: Vec<f64>,
        x1: Vec<f64>,
    },
    Step(StepRecord),
}

impl DensePiece {
    fn t0(&self) -> f64 {
        match self {
            DensePiece::Linear { t0, .. } => *t0,
            DensePiece::Step(s) => s.t0,
        }
    }

    fn eval(&self, t: f64) -> Vec<f64> {
        match self {
            DensePiece::Linear { t0, t1, x0, x1 } => {
                let th = ((t - t0) / (t1 - t0)).clamp(0.0, 1.0);
                x0.iter().zip(x1).map(|(a, b)| a + th * (b - a)).collect()
            }
            DensePiece::Step(s) => s.eval(t),
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct DenseOrbit {
    pub t_start: f64,
    pub x_start: Vec<f64>,
    pub t_stop: f64,
    pieces: Vec<DensePiece>,
}

impl DenseOrbit {
    pub fn eval(&self, t: f64) -> Vec<f64> {
        if t <= self.t_start || self.pieces.is_empty() {
            return self.x_start.clone();
        }
        let t = t.min(self.t_stop);
        let idx = self.pieces.partition_point(|p| p.t0() <= t);
        self.pieces[idx.saturating_sub(1)].eval(t)
    }
}

/// Result of integrating the sliding flow.
pub(crate) struct Slide {
    pub trajectory: Trajectory,
    pub end: Event,
    pub dense: DenseOrbit,
}

/// Integrates the sliding flow from `state` until it leaves the sliding
/// region (`SlideExit`), reaches a point where both fields are tangent
/// (`DoubleTangency`) or the horizon (`Terminate`).
///
/// States are projected back onto the surface whenever `|sigma|` exceeds
/// `sliding_projection_tol`.
pub fn flow_sliding(
    sys: &(impl PwsSystem + ?Sized),
    state: &FlowState,
    cfg: &IntegratorConfig,
) -> Result<(Trajectory, Event)> {
    let slide = slide(sys, state.t, &state.x, cfg.t_end, cfg, None)?;
    Ok((slide.trajectory, slide.end))
}

pub(crate) fn slide(
    sys: &(impl PwsSystem + ?Sized),
    t0: f64,
    x0: &[f64],
    t_stop: f64,
    cfg: &IntegratorConfig,
    prefix: Option<DensePiece>,
) -> Result<Slide> {
    let tol = cfg.tolerances();
    let x0 = project_to_surface(sys, x0)?;
    let mut traj = Trajectory::new();
    let mut pieces: Vec<DensePiece> = prefix.into_iter().collect();
    let (t_start, x_start) = match pieces.first() {
        Some(DensePiece::Linear { t0, x0, .. }) => (*t0, x0.clone()),
        _ => (t0, x0.clone()),
    };
    traj.push_sample(FlowState::new(t_start, x_start.clone(), Region::Sliding));
    traj.push_sample(FlowState::new(t0, x0.clone(), Region::Sliding));
    let finish = |traj: Trajectory, end: Event, pieces: Vec<DensePiece>, t_stop: f64| Slide {
        trajectory: traj,
        end,
        dense: DenseOrbit {
            t_start,
            x_start: x_start.clone(),
            t_stop,
            pieces,
        },
    };
    if t0 >= t_stop {
        let e = Event::terminate(t0, x0.clone(), TerminateReason::Horizon);
        return Ok(finish(traj, e, pieces, t0));
    }

    let first = surface_eval(sys, &x0, &tol)?;
    first.sliding_field()?;
    let mut prev = first.normals;
    // Stages that land exactly on a double tangency, where lambda_s is 0/0,
    // reuse the weight of the last accepted step.
    let last_lambda = Cell::new(prev.lambda_s.unwrap_or(0.5));
    let rhs = |x: &[f64], out: &mut [f64]| -> Result<()> {
        let ev = surface_eval(sys, x, &tol)?;
        let lambda = ev.normals.lambda_s.unwrap_or(last_lambda.get());
        out.copy_from_slice(&ev.combination(lambda));
        Ok(())
    };
    let rhs: &Rhs = &rhs;
    let mut stepper = Stepper::new(rhs, t0, x0.clone(), cfg.step_settings())?;
    let mut sampler = Sampler::new(cfg.sample_interval, t0);

    // Recent (t, lambda_s) pairs at accepted step ends.
    let mut history: Vec<(f64, f64)> = prev.lambda_s.map(|l| (t0, l)).into_iter().collect();
    let arm = |n: &NormalData, h: f64| -> Option<f64> {
        (h.abs() > 10.0 * n.tangency_eps(&tol)).then(|| h.signum())
    };
    let mut armed = [arm(&prev, prev.h_plus), arm(&prev, prev.h_minus)];
    let branches = [Branch::Plus, Branch::Minus];

    loop {
        let step = stepper.step(t_stop)?;
        let next = surface_eval(sys, &step.y1, &tol)?.normals;

        let mut roots: Vec<(f64, Branch, Vec<f64>)> = Vec::new();
        for (i, &b) in branches.iter().enumerate() {
            let h1 = next.h(b);
            match armed[i] {
                Some(sign) if sign * h1 <= 0.0 => {
                    let g = |x: &[f64]| -> Result<f64> {
                        let n = surface_eval(sys, x, &tol)?.normals;
                        Ok(n.h(b))
                    };
                    let (t, x, _) = locate_root(
                        &step,
                        &g,
                        (step.t0, prev.h(b)),
                        (step.t1(), h1),
                        cfg.event_root_tol,
                    )?;
                    roots.push((t, b, x));
                }
                Some(_) => {}
                None => armed[i] = arm(&next, h1),
            }
        }

        // Both normals inside the tangency band: the slide has reached a
        // double tangency without either crossing zero yet.
        if roots.is_empty()
            && next.h_plus.abs() <= next.tangency_eps(&tol)
            && next.h_minus.abs() <= next.tangency_eps(&tol)
        {
            let (t, x) = (step.t1(), project_to_surface(sys, &step.y1)?);
            let normals = surface_eval(sys, &x, &tol)?.normals;
            sampler.emit(&step, t, Region::Sliding, &mut traj);
            traj.push_sample(FlowState::new(t, x.clone(), Region::Sliding));
            pieces.push(DensePiece::Step(step.clone()));
            let mut e = Event::new(EventKind::DoubleTangency, t, x).with_normals(&normals, &tol);
            e.lambda_limit = Some(lambda_limit(sys, &history, &step, t, &tol)?);
            return Ok(finish(traj, e, pieces, t));
        }

        if let Some(first) = roots.iter().min_by(|a, b| a.0.total_cmp(&b.0)).cloned() {
            let (t, b, x) = first;
            let x = project_to_surface(sys, &x)?;
            let normals = surface_eval(sys, &x, &tol)?.normals;
            let other_close = roots
                .iter()
                .any(|r| r.1 != b && (r.0 - t).abs() <= 100.0 * cfg.event_root_tol);
            let double = other_close || normals.h(b.other()).abs() <= normals.tangency_eps(&tol);
            sampler.emit(&step, t, Region::Sliding, &mut traj);
            traj.push_sample(FlowState::new(t, x.clone(), Region::Sliding));
            pieces.push(DensePiece::Step(step.clone()));
            let end = if double {
                let mut e =
                    Event::new(EventKind::DoubleTangency, t, x).with_normals(&normals, &tol);
                e.lambda_limit = Some(lambda_limit(sys, &history, &step, t, &tol)?);
                e
            } else {
                let plus = departs(sys, &normals, Branch::Plus, &tol)?;
                let minus = departs(sys, &normals, Branch::Minus, &tol)?;
                let exit = match (plus, minus) {
                    (true, false) => Branch::Plus,
                    (false, true) => Branch::Minus,
                    (true, true) => b,
                    (false, false) => {
                        return Err(PwsError::Unclassifiable {
                            x,
                            h_plus: normals.h_plus,
                            h_minus: normals.h_minus,
                            reason: "sliding exit with no departing field",
                        })
                    }
                };
                Event::new(EventKind::SlideExit, t, x)
                    .with_normals(&normals, &tol)
                    .with_branch(exit)
            };
            return Ok(finish(traj, end, pieces, t));
        }

        if next.h_plus * next.h_minus > 0.0
            && next.h_plus.abs().min(next.h_minus.abs()) > 10.0 * next.tangency_eps(&tol)
            && armed.iter().all(Option::is_some)
        {
            return Err(PwsError::EventMiss {
                t: step.t1(),
                lambda: next.lambda_s.unwrap_or(f64::NAN),
            });
        }

        let mut y1 = step.y1.clone();
        if sys.sigma_checked(&y1)?.abs() > cfg.sliding_projection_tol {
            y1 = project_to_surface(sys, &y1)?;
            stepper.reset_state(y1.clone())?;
        }
        sampler.emit(&step, step.t1(), Region::Sliding, &mut traj);
        pieces.push(DensePiece::Step(step));
        if escaped(cfg, &y1) {
            traj.push_sample(FlowState::new(stepper.t, y1.clone(), Region::Sliding));
            let e = Event::terminate(stepper.t, y1, TerminateReason::Escaped);
            return Ok(finish(traj, e, pieces, stepper.t));
        }
        if stepper.t >= t_stop {
            traj.push_sample(FlowState::new(stepper.t, y1.clone(), Region::Sliding));
            let e = Event::terminate(stepper.t, y1, TerminateReason::Horizon);
            return Ok(finish(traj, e, pieces, stepper.t));
        }
        prev = surface_eval(sys, &stepper.y, &tol)?.normals;
        if let Some(l) = prev.lambda_s {
            last_lambda.set(l);
            history.push((stepper.t, l));
            if history.len() > 2 {
                history.remove(0);
            }
        }
    }
}

/// One-sided limit of `lambda_s` along the incoming sliding orbit at `t`,
/// extrapolated linearly from the last accepted step ends. Points close to
/// the tangency are avoided: there `lambda_s` is dominated by the error of
/// the located event point.
fn lambda_limit(
    sys: &(impl PwsSystem + ?Sized),
    history: &[(f64, f64)],
    step: &StepRecord,
    t: f64,
    tol: &Tolerances,
) -> Result<f64> {
    match history {
        [.., (ta, la), (tb, lb)] if tb > ta => Ok(lb + (lb - la) * (t - tb) / (tb - ta)),
        [.., (_, l)] => Ok(*l),
        [] => {
            let mid = step.eval(0.5 * (step.t0 + t));
            surface_eval(sys, &mid, tol)?
                .normals
                .lambda_s
                .ok_or(PwsError::DegenerateDenominator {
                    x: mid,
                    denominator: 0.0,
                })
        }
    }
}

/// Where a sticking orbit starts.
#[derive(Debug, Clone)]
pub(crate) enum StickStart {
    /// A point where both fields are tangent, reached along a sliding orbit
    /// whose `lambda_s` tends to `lambda_limit`.
    DoubleTangency { lambda_limit: f64 },
    /// A fold of `incoming`, reached by an orbit of that field.
    Fold { incoming: Branch },
}

/// Sticking orbit from a non-deterministic point, up to `t_stop` or the end
/// of the sliding region.
pub(crate) fn stick(
    sys: &(impl PwsSystem + ?Sized),
    t: f64,
    x: &[f64],
    start: &StickStart,
    t_stop: f64,
    cfg: &IntegratorConfig,
) -> Result<Slide> {
    let tol = cfg.tolerances();
    let x = project_to_surface(sys, x)?;
    match *start {
        StickStart::DoubleTangency { lambda_limit } => {
            let eval = surface_eval(sys, &x, &tol)?;
            let f_lim = eval.combination(lambda_limit);
            let dt = cfg.pass_through_step.min((t_stop - t).max(0.0));
            if dt <= 0.0 {
                return slide(sys, t, &x, t_stop, cfg, None);
            }
            let x1: Vec<f64> = x.iter().zip(&f_lim).map(|(a, f)| a + dt * f).collect();
            let x1 = project_to_surface(sys, &x1)?;
            let piece = DensePiece::Linear {
                t0: t,
                t1: t + dt,
                x0: x.clone(),
                x1: x1.clone(),
            };
            slide(sys, t + dt, &x1, t_stop, cfg, Some(piece))
        }
        StickStart::Fold { incoming } => {
            let normals = surface_eval(sys, &x, &tol)?.normals;
            let other = incoming.other();
            let h_other = normals.h(other);
            // Sticking needs the far field to leave transversally, which
            // makes the region beyond the fold repelling.
            if h_other.abs() <= normals.tangency_eps(&tol) || other.sign() * h_other <= 0.0 {
                return Err(PwsError::NoStickingRegion { x });
            }
            slide(sys, t, &x, t_stop, cfg, None)
        }
    }
}

/// Integrates a full orbit, concatenating free flight, crossings and
/// sliding until the horizon or a terminal event.
///
/// Grazes and double tangencies are resolved by `selector`; a halting
/// selector ends the orbit there.
pub fn integrate_orbit(
    sys: &(impl PwsSystem + ?Sized),
    initial: &FlowState,
    cfg: &IntegratorConfig,
    selector: &mut BranchSelector,
) -> Result<Trajectory> {
    cfg.validate()?;
    let tol = cfg.tolerances();
    let mut traj = Trajectory::new();
    traj.push_sample(initial.clone());
    let mut state = initial.clone();
    if state.region == Region::Sliding {
        let sigma = sys.sigma_checked(&state.x)?;
        let band = tol.band(&state.x);
        if sigma.abs() > band {
            return Err(PwsError::OffSurface { sigma, band });
        }
    }
    let mut stalled = 0usize;
    let mut last_event_t = f64::NEG_INFINITY;

    loop {
        if traj.events.len() > cfg.max_events {
            return Err(PwsError::Chattering {
                t: state.t,
                count: traj.events.len(),
            });
        }
        if state.t <= last_event_t + 1e-13 * (1.0 + state.t.abs()) {
            stalled += 1;
            if stalled > 64 {
                return Err(PwsError::Chattering {
                    t: state.t,
                    count: stalled,
                });
            }
        } else {
            stalled = 0;
        }
        last_event_t = state.t;

        let pending = match state.region {
            Region::Above | Region::Below => {
                let branch = state.region.branch().expect("free region has a branch");
                let (seg, ev) = flow_free(sys, &state, branch, cfg)?;
                traj.append(seg);
                if ev.kind == EventKind::Terminate {
                    traj.events.push(ev);
                    return Ok(traj);
                }
                traj.events.push(ev.clone());
                match step_surface(sys, &ev, cfg)? {
                    SurfaceStep::Continue { state: next, event } => {
                        traj.events.push(event);
                        traj.push_sample(next.clone());
                        state = next;
                        continue;
                    }
                    SurfaceStep::NonDeterministic { event } => event,
                }
            }
            Region::Sliding => {
                let s = slide(sys, state.t, &state.x, cfg.t_end, cfg, None)?;
                traj.append(s.trajectory);
                match s.end.kind {
                    EventKind::SlideExit => {
                        let b = s.end.branch.expect("exit carries its branch");
                        state = FlowState::new(s.end.t, s.end.x.clone(), Region::of(b));
                        traj.events.push(s.end);
                        continue;
                    }
                    EventKind::DoubleTangency => s.end,
                    _ => {
                        traj.events.push(s.end);
                        return Ok(traj);
                    }
                }
            }
        };

        match resolve(sys, pending, cfg, selector, &mut traj)? {
            Some(next) => state = next,
            None => return Ok(traj),
        }
    }
}

/// Continues through a non-deterministic point according to the selector.
/// Returns the next state, or `None` when the orbit ends there.
fn resolve(
    sys: &(impl PwsSystem + ?Sized),
    mut event: Event,
    cfg: &IntegratorConfig,
    selector: &mut BranchSelector,
    traj: &mut Trajectory,
) -> Result<Option<FlowState>> {
    let tol = cfg.tolerances();
    let start = match event.kind {
        // Without a limit the point was reached from free flight: there is
        // no incoming sliding orbit to continue, so no sticking is possible.
        EventKind::DoubleTangency => event
            .lambda_limit
            .map(|l| StickStart::DoubleTangency { lambda_limit: l }),
        EventKind::Graze => Some(StickStart::Fold {
            incoming: event.branch.expect("graze carries its branch"),
        }),
        _ => unreachable!("only non-deterministic events are resolved"),
    };
    let horizon = selector.tau_horizon();
    if horizon.is_none() {
        traj.events.push(event.clone());
        traj.events.push(Event::terminate(
            event.t,
            event.x.clone(),
            TerminateReason::Halted,
        ));
        return Ok(None);
    }
    let t_stop = (event.t + horizon.unwrap_or(0.0)).min(cfg.t_end);
    let stuck = match &start {
        Some(s) => match stick(sys, event.t, &event.x, s, t_stop, cfg) {
            Ok(slide) => Some(slide),
            Err(PwsError::NoStickingRegion { .. }) => None,
            Err(e) => return Err(e),
        },
        None => None,
    };
    let cap = stuck.as_ref().map_or(0.0, |s| s.dense.t_stop - event.t);
    let Some(Choice { tau, branch }) = selector.choose(cap) else {
        traj.events.push(event.clone());
        traj.events.push(Event::terminate(
            event.t,
            event.x.clone(),
            TerminateReason::Halted,
        ));
        return Ok(None);
    };
    let tau = tau.clamp(0.0, cap);

    // Sticking all the way to a natural end of the slide follows that end.
    if let Some(s) = &stuck {
        if tau >= cap && s.end.kind != EventKind::Terminate {
            event.selection = Some(Selection {
                tau: cap,
                branch: s.end.branch,
                cap,
                substituted: false,
            });
            traj.events.push(event);
            traj.append(s.trajectory.clone());
            let end = s.end.clone();
            return match end.kind {
                EventKind::SlideExit => {
                    let b = end.branch.expect("exit carries its branch");
                    let next = FlowState::new(end.t, end.x.clone(), Region::of(b));
                    traj.events.push(end);
                    Ok(Some(next))
                }
                _ => {
                    // Another double tangency: resolve it in turn.
                    resolve(sys, end, cfg, selector, traj)
                }
            };
        }
    }

    let t_rel = event.t + tau;
    let x_rel = match &stuck {
        Some(s) if tau > 0.0 => project_to_surface(sys, &s.dense.eval(t_rel))?,
        _ => project_to_surface(sys, &event.x)?,
    };
    let normals = surface_eval(sys, &x_rel, &tol)?.normals;
    let chosen = if departs(sys, &normals, branch, &tol)? {
        Some((branch, false))
    } else if departs(sys, &normals, branch.other(), &tol)? {
        Some((branch.other(), true))
    } else {
        None
    };
    let Some((released, substituted)) = chosen else {
        return Err(PwsError::Unclassifiable {
            x: x_rel,
            h_plus: normals.h_plus,
            h_minus: normals.h_minus,
            reason: "no field departs at the release point",
        });
    };
    event.selection = Some(Selection {
        tau,
        branch: Some(released),
        cap,
        substituted,
    });
    traj.events.push(event);
    if let Some(s) = &stuck {
        if tau > 0.0 {
            let mut part = s.trajectory.clone();
            part.events.clear();
            part.truncate_after(t_rel);
            traj.append(part);
            traj.push_sample(FlowState::new(t_rel, x_rel.clone(), Region::Sliding));
        }
    }
    traj.events.push(
        Event::new(EventKind::SlideExit, t_rel, x_rel.clone())
            .with_normals(&normals, &tol)
            .with_branch(released),
    );
    Ok(Some(FlowState::new(t_rel, x_rel, Region::of(released))))
}

/// First local minimum of the signed distance `±sigma` along the smooth flow
/// of `branch` from `p`, with the field extended across the surface.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrazingCandidate {
    pub t: f64,
    pub x: Vec<f64>,
    /// `+sigma` for `Plus`, `-sigma` for `Minus`, at the minimum. Negative
    /// when the orbit crosses the surface before turning.
    pub signed_min: f64,
}

/// Signed depth of the first near-approach of the `branch` flow from `p`
/// (starting at `t = 0`) to the surface; `None` if the flow has no local
/// minimum of `±sigma` before `cfg.t_end`.
pub fn grazing_indicator(
    sys: &(impl PwsSystem + ?Sized),
    p: &[f64],
    branch: Branch,
    cfg: &IntegratorConfig,
) -> Result<Option<GrazingCandidate>> {
    let s = branch.sign();
    let rate = |x: &[f64]| -> Result<f64> {
        let f = sys.field(branch, x)?;
        Ok(s * dot(&f, &sys.grad_sigma_checked(x)?))
    };
    let rhs = |x: &[f64], out: &mut [f64]| sys.field_into(branch, x, out);
    let rhs: &Rhs = &rhs;
    let mut stepper = Stepper::new(rhs, 0.0, p.to_vec(), cfg.step_settings())?;
    let mut prev = rate(p)?;
    while stepper.t < cfg.t_end {
        let step = stepper.step(cfg.t_end)?;
        let next = rate(&step.y1)?;
        if prev < 0.0 && next >= 0.0 {
            let (t, x, _) = locate_root(
                &step,
                &rate,
                (step.t0, prev),
                (step.t1(), next),
                cfg.event_root_tol,
            )?;
            let signed_min = s * sys.sigma_checked(&x)?;
            return Ok(Some(GrazingCandidate { t, x, signed_min }));
        }
        if escaped(cfg, &step.y1) {
            break;
        }
        prev = next;
    }
    Ok(None)
}

/// Locates a grazing of the `branch` flow from `p`: the first local minimum
/// of `±sigma` when it lies on the surface band. Returns `(t1, x_graze)`.
pub fn detect_grazing(
    sys: &(impl PwsSystem + ?Sized),
    p: &[f64],
    branch: Branch,
    cfg: &IntegratorConfig,
) -> Result<Option<(f64, Vec<f64>)>> {
    let tol = cfg.tolerances();
    Ok(grazing_indicator(sys, p, branch, cfg)?
        .and_then(|c| (c.signed_min.abs() <= tol.band(&c.x)).then_some((c.t, c.x))))
}

/// A smooth vector field with a distinguished scalar used only to tag regions.
pub trait SmoothSystem: Send + Sync {
    fn dim(&self) -> usize;
    fn rhs(&self, x: &[f64], out: &mut [f64]);
    fn sigma(&self, x: &[f64]) -> f64;
}

/// Integrates a smooth system with no events. Samples are tagged above or
/// below by the sign of `sigma`.
pub fn flow_smooth(
    sys: &(impl SmoothSystem + ?Sized),
    t0: f64,
    x0: &[f64],
    cfg: &IntegratorConfig,
) -> Result<Trajectory> {
    cfg.validate()?;
    let region = |x: &[f64]| {
        if sys.sigma(x) >= 0.0 {
            Region::Above
        } else {
            Region::Below
        }
    };
    let rhs = |x: &[f64], out: &mut [f64]| -> Result<()> {
        sys.rhs(x, out);
        if out.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(PwsError::NonFinite {
                field: crate::system::Field::FPlus,
                x: x.to_vec(),
            })
        }
    };
    let rhs: &Rhs = &rhs;
    let mut traj = Trajectory::new();
    traj.push_sample(FlowState::new(t0, x0.to_vec(), region(x0)));
    if t0 >= cfg.t_end {
        traj.events
            .push(Event::terminate(t0, x0.to_vec(), TerminateReason::Horizon));
        return Ok(traj);
    }
    let mut stepper = Stepper::new(rhs, t0, x0.to_vec(), cfg.step_settings())?;
    let mut sampler = Sampler::new(cfg.sample_interval, t0);
    while stepper.t < cfg.t_end {
        let step = stepper.step(cfg.t_end)?;
        match cfg.sample_interval {
            None => traj.push_sample(FlowState::new(step.t1(), step.y1.clone(), region(&step.y1))),
            Some(dt) => loop {
                let t = sampler.next as f64 * dt;
                if t > step.t1() {
                    break;
                }
                if t >= step.t0 {
                    let y = step.eval(t);
                    let r = region(&y);
                    traj.push_sample(FlowState::new(t, y, r));
                }
                sampler.next += 1;
            },
        }
        if escaped(cfg, &step.y1) {
            traj.events.push(Event::terminate(
                step.t1(),
                step.y1.clone(),
                TerminateReason::Escaped,
            ));
            return Ok(traj);
        }
    }
    let y = stepper.y.clone();
    let r = region(&y);
    traj.push_sample(FlowState::new(stepper.t, y.clone(), r));
    traj.events
        .push(Event::terminate(stepper.t, y, TerminateReason::Horizon));
    Ok(traj)
}
