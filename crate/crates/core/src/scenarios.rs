//! Built-in systems: a resonator with thermal switching, a planar double
//! fold, a stick-slip oscillator, small fixtures with known answers, and
//! sigmoid-smoothed versions of any of them.

use std::collections::BTreeMap;
use std::sync::Arc;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{PwsError, Result};
use crate::integrator::SmoothSystem;
use crate::system::{Branch, PwsSystem};

/// Parameters of the resonator. The state is `(Re B, Im B, T)`; `(Lambda+, s+)`
/// are active for `T > 1`, `(Lambda-, s-)` for `T < 1`, and
/// `Lambda+ = lambda_plus_re + i mu`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ResonatorParams {
    pub eps: f64,
    pub s_plus: f64,
    pub s_minus: f64,
    pub lambda_minus_re: f64,
    pub lambda_minus_im: f64,
    pub lambda_plus_re: f64,
    pub mu: f64,
}

impl Default for ResonatorParams {
    fn default() -> Self {
        ResonatorParams {
            eps: 0.01,
            s_plus: 3.891,
            s_minus: 1.297,
            lambda_minus_re: -0.2,
            lambda_minus_im: 1.0,
            lambda_plus_re: -0.5,
            mu: 1.0,
        }
    }
}

impl ResonatorParams {
    pub fn lambda_plus(&self) -> Complex64 {
        Complex64::new(self.lambda_plus_re, self.mu)
    }

    pub fn lambda_minus(&self) -> Complex64 {
        Complex64::new(self.lambda_minus_re, self.lambda_minus_im)
    }

    fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0) {
            return Err(PwsError::InvalidConfig(format!(
                "resonator eps must be positive, got {}",
                self.eps
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Resonator {
    params: ResonatorParams,
    lambda: [Complex64; 2],
    s: [f64; 2],
}

/// Builds the resonator; `eps` must be positive.
pub fn make_resonator(params: ResonatorParams) -> Result<Resonator> {
    params.validate()?;
    Ok(Resonator {
        params,
        lambda: [params.lambda_plus(), params.lambda_minus()],
        s: [params.s_plus, params.s_minus],
    })
}

impl Resonator {
    pub fn params(&self) -> &ResonatorParams {
        &self.params
    }

    /// Active `(Lambda, s)` pair for `branch`.
    pub fn coefficients(&self, branch: Branch) -> (Complex64, f64) {
        let i = match branch {
            Branch::Plus => 0,
            Branch::Minus => 1,
        };
        (self.lambda[i], self.s[i])
    }

    /// Equilibrium of the upper field: `B* = i / Lambda+`, `T* = s+ |B*|^2`.
    pub fn fixed_point_upper(&self) -> [f64; 3] {
        let b = Complex64::i() / self.lambda[0];
        [b.re, b.im, self.s[0] * b.norm_sqr()]
    }

    /// `|B|^2` on which `branch` is tangent to `T = 1`.
    pub fn tangency_power(&self, branch: Branch) -> f64 {
        1.0 / self.coefficients(branch).1
    }

    /// Initial point of the published time traces.
    pub fn initial_point() -> [f64; 3] {
        [0.8, -0.4, 3.0]
    }

    fn eval(&self, branch: Branch, x: &[f64], out: &mut [f64]) {
        let (lambda, s) = self.coefficients(branch);
        let b = Complex64::new(x[0], x[1]);
        let db = lambda * b - Complex64::i();
        out[0] = db.re;
        out[1] = db.im;
        out[2] = (s * b.norm_sqr() - x[2]) / self.params.eps;
    }
}

impl PwsSystem for Resonator {
    fn dim(&self) -> usize {
        3
    }

    fn f_plus(&self, x: &[f64], out: &mut [f64]) {
        self.eval(Branch::Plus, x, out)
    }

    fn f_minus(&self, x: &[f64], out: &mut [f64]) {
        self.eval(Branch::Minus, x, out)
    }

    fn sigma(&self, x: &[f64]) -> f64 {
        x[2] - 1.0
    }

    fn grad_sigma(&self, _x: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&[0.0, 0.0, 1.0]);
    }

    fn lie_second(&self, branch: Branch, x: &[f64]) -> Option<f64> {
        let (_, s) = self.coefficients(branch);
        let mut f = [0.0; 3];
        self.eval(branch, x, &mut f);
        Some((2.0 * s * (x[0] * f[0] + x[1] * f[1]) - f[2]) / self.params.eps)
    }

    fn name(&self) -> &str {
        "resonator"
    }

    fn component_names(&self) -> Vec<String> {
        vec!["re_b".into(), "im_b".into(), "temp".into()]
    }
}

/// The planar double fold `f± = (-1 ± x2, x2 ∓ x1)`, `sigma = x2`.
///
/// Both fields are tangent to `x2 = 0` at the origin; sliding is attracting
/// for `x1 > 0` and repelling for `x1 < 0`, with `f^s = (-1, 0)` throughout.
#[derive(Debug, Clone, Copy, Default)]
pub struct DbFold;

pub fn make_dbfold() -> DbFold {
    DbFold
}

impl DbFold {
    pub const FOCUS_PLUS: [f64; 2] = [1.0, 1.0];
    pub const FOCUS_MINUS: [f64; 2] = [1.0, -1.0];
    pub const DOUBLE_TANGENCY: [f64; 2] = [0.0, 0.0];

    pub fn landmarks() -> Vec<(&'static str, Vec<f64>)> {
        vec![
            ("focus_plus", Self::FOCUS_PLUS.to_vec()),
            ("focus_minus", Self::FOCUS_MINUS.to_vec()),
            ("double_tangency", Self::DOUBLE_TANGENCY.to_vec()),
        ]
    }
}

impl PwsSystem for DbFold {
    fn dim(&self) -> usize {
        2
    }

    fn f_plus(&self, x: &[f64], out: &mut [f64]) {
        out[0] = -1.0 + x[1];
        out[1] = x[1] - x[0];
    }

    fn f_minus(&self, x: &[f64], out: &mut [f64]) {
        out[0] = -1.0 - x[1];
        out[1] = x[1] + x[0];
    }

    fn sigma(&self, x: &[f64]) -> f64 {
        x[1]
    }

    fn grad_sigma(&self, _x: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&[0.0, 1.0]);
    }

    fn lie_second(&self, branch: Branch, x: &[f64]) -> Option<f64> {
        Some(match branch {
            Branch::Plus => 1.0 - x[0],
            Branch::Minus => x[0] - 1.0,
        })
    }

    fn name(&self) -> &str {
        "dbfold"
    }

    fn component_names(&self) -> Vec<String> {
        vec!["x1".into(), "x2".into()]
    }
}

/// Parameters of the oscillator `x' = u + v`,
/// `u' = -x + b u + r1 z + (r2 - r1) z H(u)`, `z' = 1 + (a - 1 + c u) H(u)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MechParams {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub v: f64,
    pub r1: f64,
    pub r2: f64,
}

impl Default for MechParams {
    fn default() -> Self {
        MechParams {
            a: -1.3,
            b: 0.1,
            c: 0.2,
            v: -1.0,
            r1: 12.0,
            r2: -1.0,
        }
    }
}

/// The stick-slip oscillator in `(x, u, z)` with `sigma = u`.
#[derive(Debug, Clone, Copy)]
pub struct Mech {
    pub params: MechParams,
}

pub fn make_mech(params: MechParams) -> Mech {
    Mech { params }
}

impl Mech {
    /// Slopes `(r1, r2)` of the tangency lines on `u = 0`: `h- = 0` on
    /// `x = r1 z` and `h+ = 0` on `x = r2 z`.
    pub fn tangency_lines(&self) -> (f64, f64) {
        (self.params.r1, self.params.r2)
    }
}

impl PwsSystem for Mech {
    fn dim(&self) -> usize {
        3
    }

    fn f_plus(&self, x: &[f64], out: &mut [f64]) {
        let p = &self.params;
        out[0] = x[1] + p.v;
        out[1] = -x[0] + p.b * x[1] + p.r2 * x[2];
        out[2] = p.a + p.c * x[1];
    }

    fn f_minus(&self, x: &[f64], out: &mut [f64]) {
        let p = &self.params;
        out[0] = x[1] + p.v;
        out[1] = -x[0] + p.b * x[1] + p.r1 * x[2];
        out[2] = 1.0;
    }

    fn sigma(&self, x: &[f64]) -> f64 {
        x[1]
    }

    fn grad_sigma(&self, _x: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&[0.0, 1.0, 0.0]);
    }

    fn lie_second(&self, branch: Branch, x: &[f64]) -> Option<f64> {
        let p = &self.params;
        let mut f = [0.0; 3];
        let r = match branch {
            Branch::Plus => {
                self.f_plus(x, &mut f);
                p.r2
            }
            Branch::Minus => {
                self.f_minus(x, &mut f);
                p.r1
            }
        };
        Some(-f[0] + p.b * f[1] + r * f[2])
    }

    fn name(&self) -> &str {
        "mech"
    }

    fn component_names(&self) -> Vec<String> {
        vec!["x".into(), "u".into(), "z".into()]
    }
}

/// Both fields `(0, ..., 0, -1)` with `sigma = x_n`: an orbit from `x_n = 1`
/// hits the surface at exactly `t = 1`.
#[derive(Debug, Clone, Copy)]
pub struct ConstantDescent {
    pub dim: usize,
}

impl PwsSystem for ConstantDescent {
    fn dim(&self) -> usize {
        self.dim
    }

    fn f_plus(&self, _x: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        out[self.dim - 1] = -1.0;
    }

    fn f_minus(&self, x: &[f64], out: &mut [f64]) {
        self.f_plus(x, out)
    }

    fn sigma(&self, x: &[f64]) -> f64 {
        x[self.dim - 1]
    }

    fn grad_sigma(&self, _x: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        out[self.dim - 1] = 1.0;
    }

    fn lie_second(&self, _branch: Branch, _x: &[f64]) -> Option<f64> {
        Some(0.0)
    }

    fn name(&self) -> &str {
        "constant_descent"
    }
}

/// `f+ = (1, 2 x1)`, `f- = (1, -1)`, `sigma = x2 - level`.
///
/// The upper orbit from `(-0.5, 0.5)` is `x2 = 0.25 + x1^2`, so its lowest
/// point sits at `sigma = 0.25 - level` and it grazes exactly at
/// `level = 0.25`.
#[derive(Debug, Clone, Copy)]
pub struct Parabola {
    pub level: f64,
}

impl Parabola {
    pub const START: [f64; 2] = [-0.5, 0.5];
    pub const GRAZING_LEVEL: f64 = 0.25;
}

impl PwsSystem for Parabola {
    fn dim(&self) -> usize {
        2
    }

    fn f_plus(&self, x: &[f64], out: &mut [f64]) {
        out[0] = 1.0;
        out[1] = 2.0 * x[0];
    }

    fn f_minus(&self, _x: &[f64], out: &mut [f64]) {
        out[0] = 1.0;
        out[1] = -1.0;
    }

    fn sigma(&self, x: &[f64]) -> f64 {
        x[1] - self.level
    }

    fn grad_sigma(&self, _x: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&[0.0, 1.0]);
    }

    fn lie_second(&self, branch: Branch, _x: &[f64]) -> Option<f64> {
        Some(match branch {
            Branch::Plus => 2.0,
            Branch::Minus => 0.0,
        })
    }

    fn name(&self) -> &str {
        "parabola"
    }
}

/// Rotations about `(0.5, 0)` with angular speed 1 above and 2 below
/// `x2 = 0`. Every orbit crosses; there is no sliding and no choice.
#[derive(Debug, Clone, Copy, Default)]
pub struct CrossingOscillator;

impl PwsSystem for CrossingOscillator {
    fn dim(&self) -> usize {
        2
    }

    fn f_plus(&self, x: &[f64], out: &mut [f64]) {
        out[0] = -x[1];
        out[1] = x[0] - 0.5;
    }

    fn f_minus(&self, x: &[f64], out: &mut [f64]) {
        out[0] = -2.0 * x[1];
        out[1] = 2.0 * (x[0] - 0.5);
    }

    fn sigma(&self, x: &[f64]) -> f64 {
        x[1]
    }

    fn grad_sigma(&self, _x: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&[0.0, 1.0]);
    }

    fn lie_second(&self, branch: Branch, x: &[f64]) -> Option<f64> {
        let w = match branch {
            Branch::Plus => 1.0,
            Branch::Minus => 2.0,
        };
        Some(-w * w * x[1])
    }

    fn name(&self) -> &str {
        "crossing_oscillator"
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SigmoidKind {
    /// `(1 + tanh y) / 2`
    #[default]
    Tanh,
    /// `(1 + y / sqrt(1 + y^2)) / 2`
    Algebraic,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SmoothingParams {
    pub steepness: f64,
    pub kind: SigmoidKind,
}

impl Default for SmoothingParams {
    fn default() -> Self {
        SmoothingParams {
            steepness: 50.0,
            kind: SigmoidKind::Tanh,
        }
    }
}

impl SmoothingParams {
    pub fn sigmoid(&self, s: f64) -> f64 {
        let y = self.steepness * s;
        match self.kind {
            SigmoidKind::Tanh => 0.5 * (1.0 + y.tanh()),
            SigmoidKind::Algebraic => 0.5 * (1.0 + y / (1.0 + y * y).sqrt()),
        }
    }
}

/// `S(k sigma) f+ + (1 - S(k sigma)) f-` for a piecewise system.
#[derive(Clone)]
pub struct Smoothed {
    base: Arc<dyn PwsSystem>,
    params: SmoothingParams,
}

impl std::fmt::Debug for Smoothed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Smoothed")
            .field("base", &self.base.name())
            .field("params", &self.params)
            .finish()
    }
}

pub fn make_smoothed(base: Arc<dyn PwsSystem>, params: SmoothingParams) -> Result<Smoothed> {
    if !(params.steepness > 0.0 && params.steepness.is_finite()) {
        return Err(PwsError::InvalidConfig(format!(
            "smoothing steepness must be positive, got {}",
            params.steepness
        )));
    }
    Ok(Smoothed { base, params })
}

impl Smoothed {
    pub fn base(&self) -> &dyn PwsSystem {
        self.base.as_ref()
    }
}

impl SmoothSystem for Smoothed {
    fn dim(&self) -> usize {
        self.base.dim()
    }

    fn rhs(&self, x: &[f64], out: &mut [f64]) {
        let w = self.params.sigmoid(self.base.sigma(x));
        let mut fm = vec![0.0; out.len()];
        self.base.f_plus(x, out);
        self.base.f_minus(x, &mut fm);
        for (o, m) in out.iter_mut().zip(&fm) {
            *o = w * *o + (1.0 - w) * m;
        }
    }

    fn sigma(&self, x: &[f64]) -> f64 {
        self.base.sigma(x)
    }
}

/// A named built-in system with its resolved parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum Scenario {
    Resonator(ResonatorParams),
    DbFold,
    Mech(MechParams),
    ConstantDescent { dim: usize },
    Parabola { level: f64 },
    CrossingOscillator,
}

pub const SCENARIO_NAMES: [&str; 6] = [
    "resonator",
    "dbfold",
    "mech",
    "constant_descent",
    "parabola",
    "crossing_oscillator",
];

impl Scenario {
    /// Looks up a scenario by name and applies parameter overrides. Unknown
    /// names and parameters are rejected.
    pub fn from_name(name: &str, overrides: &BTreeMap<String, f64>) -> Result<Scenario> {
        let mut s = match name {
            "resonator" => Scenario::Resonator(ResonatorParams::default()),
            "dbfold" => Scenario::DbFold,
            "mech" => Scenario::Mech(MechParams::default()),
            "constant_descent" => Scenario::ConstantDescent { dim: 2 },
            "parabola" => Scenario::Parabola { level: 0.0 },
            "crossing_oscillator" => Scenario::CrossingOscillator,
            other => {
                return Err(PwsError::InvalidConfig(format!(
                    "unknown scenario '{other}' (expected one of {})",
                    SCENARIO_NAMES.join(", ")
                )))
            }
        };
        for (k, v) in overrides {
            s.set(k, *v)?;
        }
        Ok(s)
    }

    pub fn name(&self) -> &'static str {
        match self {
            Scenario::Resonator(_) => "resonator",
            Scenario::DbFold => "dbfold",
            Scenario::Mech(_) => "mech",
            Scenario::ConstantDescent { .. } => "constant_descent",
            Scenario::Parabola { .. } => "parabola",
            Scenario::CrossingOscillator => "crossing_oscillator",
        }
    }

    pub fn set(&mut self, key: &str, value: f64) -> Result<()> {
        let slot: Option<&mut f64> = match self {
            Scenario::Resonator(p) => match key {
                "eps" => Some(&mut p.eps),
                "s_plus" => Some(&mut p.s_plus),
                "s_minus" => Some(&mut p.s_minus),
                "lambda_minus_re" => Some(&mut p.lambda_minus_re),
                "lambda_minus_im" => Some(&mut p.lambda_minus_im),
                "lambda_plus_re" => Some(&mut p.lambda_plus_re),
                "mu" => Some(&mut p.mu),
                _ => None,
            },
            Scenario::Mech(p) => match key {
                "a" => Some(&mut p.a),
                "b" => Some(&mut p.b),
                "c" => Some(&mut p.c),
                "v" => Some(&mut p.v),
                "r1" => Some(&mut p.r1),
                "r2" => Some(&mut p.r2),
                _ => None,
            },
            Scenario::Parabola { level } => match key {
                "level" => Some(level),
                _ => None,
            },
            Scenario::ConstantDescent { dim } => {
                if key == "dim" {
                    if value.fract() != 0.0 || value < 1.0 {
                        return Err(PwsError::InvalidConfig(format!(
                            "dim must be a positive integer, got {value}"
                        )));
                    }
                    *dim = value as usize;
                    return Ok(());
                }
                None
            }
            Scenario::DbFold | Scenario::CrossingOscillator => None,
        };
        match slot {
            Some(v) => {
                *v = value;
                Ok(())
            }
            None => Err(PwsError::InvalidConfig(format!(
                "scenario '{}' has no parameter '{key}' (known: {})",
                self.name(),
                self.params().keys().cloned().collect::<Vec<_>>().join(", ")
            ))),
        }
    }

    pub fn params(&self) -> BTreeMap<String, f64> {
        let pairs: Vec<(&str, f64)> = match self {
            Scenario::Resonator(p) => vec![
                ("eps", p.eps),
                ("s_plus", p.s_plus),
                ("s_minus", p.s_minus),
                ("lambda_minus_re", p.lambda_minus_re),
                ("lambda_minus_im", p.lambda_minus_im),
                ("lambda_plus_re", p.lambda_plus_re),
                ("mu", p.mu),
            ],
            Scenario::Mech(p) => vec![
                ("a", p.a),
                ("b", p.b),
                ("c", p.c),
                ("v", p.v),
                ("r1", p.r1),
                ("r2", p.r2),
            ],
            Scenario::Parabola { level } => vec![("level", *level)],
            Scenario::ConstantDescent { dim } => vec![("dim", *dim as f64)],
            Scenario::DbFold | Scenario::CrossingOscillator => vec![],
        };
        pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }

    pub fn system(&self) -> Result<Arc<dyn PwsSystem>> {
        Ok(match self {
            Scenario::Resonator(p) => Arc::new(make_resonator(*p)?),
            Scenario::DbFold => Arc::new(make_dbfold()),
            Scenario::Mech(p) => Arc::new(make_mech(*p)),
            Scenario::ConstantDescent { dim } => Arc::new(ConstantDescent { dim: *dim }),
            Scenario::Parabola { level } => Arc::new(Parabola { level: *level }),
            Scenario::CrossingOscillator => Arc::new(CrossingOscillator),
        })
    }

    /// A sensible starting point for each system.
    pub fn default_initial(&self) -> Vec<f64> {
        match self {
            Scenario::Resonator(_) => Resonator::initial_point().to_vec(),
            Scenario::DbFold => vec![2.0, 0.0],
            Scenario::Mech(_) => vec![0.5, 0.0, 0.1],
            Scenario::ConstantDescent { dim } => {
                let mut x = vec![0.0; *dim];
                x[dim - 1] = 1.0;
                x
            }
            Scenario::Parabola { .. } => Parabola::START.to_vec(),
            Scenario::CrossingOscillator => vec![0.5, 0.5],
        }
    }

    pub fn description(&self) -> &'static str {
        match self {
            Scenario::Resonator(_) => {
                "thermally switched resonator, state (Re B, Im B, T), surface T = 1"
            }
            Scenario::DbFold => "planar double fold, surface x2 = 0, double tangency at the origin",
            Scenario::Mech(_) => "stick-slip oscillator, state (x, u, z), surface u = 0",
            Scenario::ConstantDescent { .. } => "constant descent onto x_n = 0, hit at t = 1",
            Scenario::Parabola { .. } => "parabolic orbit over x2 = level, grazing at level = 0.25",
            Scenario::CrossingOscillator => "two rotations glued along x2 = 0, crossing only",
        }
    }
}
