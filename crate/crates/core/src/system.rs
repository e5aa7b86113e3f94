//! Piecewise-smooth systems and the pointwise algebra on the switching surface.
//!
//! A system is the triple `(f+, f-, sigma)`: `f+` drives the state where
//! `sigma > 0`, `f-` where `sigma < 0`. On `sigma = 0` the normal components
//! `h± = f±·∇σ` decide whether an orbit crosses (same sign), sticks (opposite
//! signs) or sits on a fold of one of the fields (`h = 0`).

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{PwsError, Result};

/// Which smooth field an orbit follows off the surface.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Plus,
    Minus,
}

impl Branch {
    /// `+1` for the field above the surface, `-1` below.
    pub fn sign(self) -> f64 {
        match self {
            Branch::Plus => 1.0,
            Branch::Minus => -1.0,
        }
    }

    pub fn other(self) -> Branch {
        match self {
            Branch::Plus => Branch::Minus,
            Branch::Minus => Branch::Plus,
        }
    }
}

impl fmt::Display for Branch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Branch::Plus => "+",
            Branch::Minus => "-",
        })
    }
}

/// Names the function whose evaluation failed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Field {
    FPlus,
    FMinus,
    Sigma,
    GradSigma,
}

impl fmt::Display for Field {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Field::FPlus => "f+",
            Field::FMinus => "f-",
            Field::Sigma => "sigma",
            Field::GradSigma => "grad sigma",
        })
    }
}

/// A Filippov system with a single switching surface `sigma(x) = 0`.
///
/// Implementations must be pure: the integrator evaluates them from many
/// threads at once.
pub trait PwsSystem: Send + Sync {
    fn dim(&self) -> usize;

    /// The field active where `sigma > 0`.
    fn f_plus(&self, x: &[f64], out: &mut [f64]);

    /// The field active where `sigma < 0`.
    fn f_minus(&self, x: &[f64], out: &mut [f64]);

    fn sigma(&self, x: &[f64]) -> f64;

    /// Gradient of `sigma`. The default is a central difference with step
    /// `1e-6 * (1 + |x_i|)` per coordinate.
    fn grad_sigma(&self, x: &[f64], out: &mut [f64]) {
        central_difference_gradient(|y| self.sigma(y), x, out);
    }

    /// Analytic second Lie derivative `(f±·∂x)^2 sigma`, when known.
    fn lie_second(&self, _branch: Branch, _x: &[f64]) -> Option<f64> {
        None
    }

    fn name(&self) -> &str {
        "custom"
    }

    fn component_names(&self) -> Vec<String> {
        (0..self.dim()).map(|i| format!("x{i}")).collect()
    }
}

/// Central-difference gradient of a scalar function.
pub fn central_difference_gradient(f: impl Fn(&[f64]) -> f64, x: &[f64], out: &mut [f64]) {
    let mut y = x.to_vec();
    for i in 0..x.len() {
        let step = 1e-6 * (1.0 + x[i].abs());
        y[i] = x[i] + step;
        let up = f(&y);
        y[i] = x[i] - step;
        let down = f(&y);
        y[i] = x[i];
        out[i] = (up - down) / (2.0 * step);
    }
}

/// Thresholds for zero tests on the surface. All are relative to the local
/// magnitude `max(|f+|, |f-|)·|∇σ|` (or to `1 + |x|` for the band).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tolerances {
    /// `|h| <= tangency * scale` counts as a tangency.
    pub tangency: f64,
    /// `|h- - h+| <= degeneracy * scale` leaves `lambda_s` undefined.
    pub degeneracy: f64,
    /// A state is on the surface when `|sigma| <= surface_band * (1 + |x|)`.
    pub surface_band: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            tangency: 1e-9,
            degeneracy: 1e-12,
            surface_band: 1e-8,
        }
    }
}

impl Tolerances {
    pub fn band(&self, x: &[f64]) -> f64 {
        self.surface_band * (1.0 + norm(x))
    }
}

/// Normal components of both fields at a point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalData {
    pub point: Vec<f64>,
    /// `f+·∇σ`
    pub h_plus: f64,
    /// `f-·∇σ`
    pub h_minus: f64,
    /// Convex weight of `f+` in the tangent combination; `None` when
    /// `h- - h+` vanishes.
    pub lambda_s: Option<f64>,
    /// `max(|f+|, |f-|)·|∇σ|`, the reference magnitude for the zero tests.
    pub scale: f64,
}

impl NormalData {
    pub fn h(&self, branch: Branch) -> f64 {
        match branch {
            Branch::Plus => self.h_plus,
            Branch::Minus => self.h_minus,
        }
    }

    pub fn tangency_eps(&self, tol: &Tolerances) -> f64 {
        tol.tangency * self.scale.max(f64::MIN_POSITIVE)
    }
}

/// Local behaviour of the flow at a surface point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SurfaceRegime {
    Crossing,
    AttractingSliding,
    RepellingSliding,
    TangencyPlus,
    TangencyMinus,
    DoubleTangency,
}

impl SurfaceRegime {
    pub fn is_sliding(self) -> bool {
        matches!(
            self,
            SurfaceRegime::AttractingSliding | SurfaceRegime::RepellingSliding
        )
    }
}

/// Everything the surface algebra needs at one point, evaluated once.
#[derive(Debug, Clone)]
pub(crate) struct SurfaceEval {
    pub f_plus: Vec<f64>,
    pub f_minus: Vec<f64>,
    pub grad: Vec<f64>,
    pub normals: NormalData,
}

/// Checked evaluation of a [`PwsSystem`]: dimension and finiteness are verified.
pub trait PwsSystemExt: PwsSystem {
    fn field(&self, branch: Branch, x: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.dim(), x)?;
        let mut out = vec![0.0; x.len()];
        self.field_into(branch, x, &mut out)?;
        Ok(out)
    }

    fn field_into(&self, branch: Branch, x: &[f64], out: &mut [f64]) -> Result<()> {
        let which = match branch {
            Branch::Plus => {
                self.f_plus(x, out);
                Field::FPlus
            }
            Branch::Minus => {
                self.f_minus(x, out);
                Field::FMinus
            }
        };
        finite_or(out, which, x)
    }

    fn sigma_checked(&self, x: &[f64]) -> Result<f64> {
        check_dim(self.dim(), x)?;
        let s = self.sigma(x);
        if s.is_finite() {
            Ok(s)
        } else {
            Err(PwsError::NonFinite {
                field: Field::Sigma,
                x: x.to_vec(),
            })
        }
    }

    fn grad_sigma_checked(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.dim(), x)?;
        let mut out = vec![0.0; x.len()];
        self.grad_sigma(x, &mut out);
        finite_or(&out, Field::GradSigma, x)?;
        Ok(out)
    }
}

impl<T: PwsSystem + ?Sized> PwsSystemExt for T {}

fn check_dim(expected: usize, x: &[f64]) -> Result<()> {
    if x.len() == expected {
        Ok(())
    } else {
        Err(PwsError::DimensionMismatch {
            expected,
            got: x.len(),
        })
    }
}

fn finite_or(v: &[f64], field: Field, x: &[f64]) -> Result<()> {
    if v.iter().all(|c| c.is_finite()) {
        Ok(())
    } else {
        Err(PwsError::NonFinite {
            field,
            x: x.to_vec(),
        })
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub(crate) fn surface_eval(
    sys: &(impl PwsSystem + ?Sized),
    x: &[f64],
    tol: &Tolerances,
) -> Result<SurfaceEval> {
    let f_plus = sys.field(Branch::Plus, x)?;
    let f_minus = sys.field(Branch::Minus, x)?;
    let grad = sys.grad_sigma_checked(x)?;
    let h_plus = dot(&f_plus, &grad);
    let h_minus = dot(&f_minus, &grad);
    let scale = norm(&f_plus).max(norm(&f_minus)) * norm(&grad);
    let denominator = h_minus - h_plus;
    let lambda_s = if denominator.abs() <= tol.degeneracy * scale || denominator == 0.0 {
        None
    } else {
        Some(h_minus / denominator)
    };
    Ok(SurfaceEval {
        normals: NormalData {
            point: x.to_vec(),
            h_plus,
            h_minus,
            lambda_s,
            scale,
        },
        f_plus,
        f_minus,
        grad,
    })
}

/// `h± = f±(x)·∇σ(x)` and the sliding coefficient
/// `lambda_s = h- / (h- - h+)`.
pub fn normal_components(
    sys: &(impl PwsSystem + ?Sized),
    x: &[f64],
    tol: &Tolerances,
) -> Result<NormalData> {
    Ok(surface_eval(sys, x, tol)?.normals)
}

impl SurfaceEval {
    /// Convex combination of the fields tangent to the surface.
    ///
    /// The residual normal component left by rounding is projected out, so
    /// the result is tangent to working precision even when `lambda_s` is
    /// large.
    pub fn sliding_field(&self) -> Result<Vec<f64>> {
        let lambda = self
            .normals
            .lambda_s
            .ok_or_else(|| PwsError::DegenerateDenominator {
                x: self.normals.point.clone(),
                denominator: self.normals.h_minus - self.normals.h_plus,
            })?;
        Ok(self.combination(lambda))
    }

    pub fn combination(&self, lambda: f64) -> Vec<f64> {
        let mut fs: Vec<f64> = self
            .f_plus
            .iter()
            .zip(&self.f_minus)
            .map(|(p, m)| lambda * p + (1.0 - lambda) * m)
            .collect();
        let g2 = dot(&self.grad, &self.grad);
        if g2 > 0.0 {
            let c = dot(&fs, &self.grad) / g2;
            for (v, g) in fs.iter_mut().zip(&self.grad) {
                *v -= c * g;
            }
        }
        fs
    }
}

/// The sliding vector field `f^s = lambda_s f+ + (1 - lambda_s) f-`.
pub fn sliding_field(
    sys: &(impl PwsSystem + ?Sized),
    x: &[f64],
    tol: &Tolerances,
) -> Result<Vec<f64>> {
    surface_eval(sys, x, tol)?.sliding_field()
}

/// Any element `lambda f+ + (1 - lambda) f-` of the inclusion on the surface,
/// for any real `lambda`. Diagnostic only; integration uses `lambda_s`.
pub fn inclusion_element(
    sys: &(impl PwsSystem + ?Sized),
    x: &[f64],
    lambda: f64,
) -> Result<Vec<f64>> {
    let fp = sys.field(Branch::Plus, x)?;
    let fm = sys.field(Branch::Minus, x)?;
    Ok(fp
        .iter()
        .zip(&fm)
        .map(|(p, m)| lambda * p + (1.0 - lambda) * m)
        .collect())
}

/// Classifies the sign pattern of the normal components; tangency bands take
/// precedence over the open sign classes.
pub fn classify_normals(normals: &NormalData, tol: &Tolerances) -> SurfaceRegime {
    let eps = normals.tangency_eps(tol);
    let zero_plus = normals.h_plus.abs() <= eps;
    let zero_minus = normals.h_minus.abs() <= eps;
    match (zero_plus, zero_minus) {
        (true, true) => SurfaceRegime::DoubleTangency,
        (true, false) => SurfaceRegime::TangencyPlus,
        (false, true) => SurfaceRegime::TangencyMinus,
        (false, false) => {
            if normals.h_plus * normals.h_minus > 0.0 {
                SurfaceRegime::Crossing
            } else if normals.h_plus < 0.0 {
                SurfaceRegime::AttractingSliding
            } else {
                SurfaceRegime::RepellingSliding
            }
        }
    }
}

/// Regime of a point on the surface band.
pub fn classify_surface_point(
    sys: &(impl PwsSystem + ?Sized),
    x: &[f64],
    tol: &Tolerances,
) -> Result<SurfaceRegime> {
    let sigma = sys.sigma_checked(x)?;
    let band = tol.band(x);
    if sigma.abs() > band {
        return Err(PwsError::OffSurface { sigma, band });
    }
    Ok(classify_normals(&normal_components(sys, x, tol)?, tol))
}

/// Second Lie derivative `(f±·∂x)^2 sigma` at `x`.
///
/// Uses the system's analytic value when it has one, otherwise a central
/// difference of `h±` along the flow direction.
pub fn quadratic_tangency_check(
    sys: &(impl PwsSystem + ?Sized),
    x: &[f64],
    branch: Branch,
) -> Result<f64> {
    if let Some(v) = sys.lie_second(branch, x) {
        return Ok(v);
    }
    finite_difference_lie_second(sys, x, branch)
}

pub(crate) fn finite_difference_lie_second(
    sys: &(impl PwsSystem + ?Sized),
    x: &[f64],
    branch: Branch,
) -> Result<f64> {
    let f = sys.field(branch, x)?;
    let speed = norm(&f);
    if speed == 0.0 {
        return Ok(0.0);
    }
    let delta = 1e-4 * (1.0 + norm(x)) / speed;
    let shifted = |y: &[f64], d: &[f64], s: f64| -> Vec<f64> {
        y.iter().zip(d).map(|(yi, di)| yi + s * di).collect()
    };
    // h = f·∇sigma as a directional difference of sigma, so the estimate
    // does not inherit the noise of a differenced gradient.
    let h_at = |s: f64| -> Result<f64> {
        let y = shifted(x, &f, s);
        let fy = sys.field(branch, &y)?;
        let eta = 1e-4 * (1.0 + norm(&y)) / norm(&fy).max(f64::MIN_POSITIVE);
        let up = sys.sigma_checked(&shifted(&y, &fy, eta))?;
        let down = sys.sigma_checked(&shifted(&y, &fy, -eta))?;
        Ok((up - down) / (2.0 * eta))
    };
    Ok((h_at(delta)? - h_at(-delta)?) / (2.0 * delta))
}

/// Whether the orbit of `branch` released at surface point `x` leaves the
/// surface into its own half-space: transversally, or tangentially with a
/// curvature that carries it off.
pub fn is_departing(
    sys: &(impl PwsSystem + ?Sized),
    x: &[f64],
    branch: Branch,
    tol: &Tolerances,
) -> Result<bool> {
    let normals = normal_components(sys, x, tol)?;
    departs(sys, &normals, branch, tol)
}

pub(crate) fn departs(
    sys: &(impl PwsSystem + ?Sized),
    normals: &NormalData,
    branch: Branch,
    tol: &Tolerances,
) -> Result<bool> {
    let s = branch.sign();
    let h = normals.h(branch);
    if h.abs() > normals.tangency_eps(tol) {
        return Ok(s * h > 0.0);
    }
    let curvature = quadratic_tangency_check(sys, &normals.point, branch)?;
    Ok(s * curvature > 0.0)
}

type VecFn = Box<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;
type ScalarFn = Box<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// A system assembled from closures, for user-supplied models and fixtures.
pub struct FnSystem {
    name: String,
    dim: usize,
    f_plus: VecFn,
    f_minus: VecFn,
    sigma: ScalarFn,
    grad_sigma: Option<VecFn>,
}

impl FnSystem {
    pub fn new(
        name: impl Into<String>,
        dim: usize,
        f_plus: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
        f_minus: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
        sigma: impl Fn(&[f64]) -> f64 + Send + Sync + 'static,
    ) -> Self {
        FnSystem {
            name: name.into(),
            dim,
            f_plus: Box::new(f_plus),
            f_minus: Box::new(f_minus),
            sigma: Box::new(sigma),
            grad_sigma: None,
        }
    }

    pub fn with_grad_sigma(
        mut self,
        grad: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        self.grad_sigma = Some(Box::new(grad));
        self
    }
}

impl fmt::Debug for FnSystem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FnSystem")
            .field("name", &self.name)
            .field("dim", &self.dim)
            .finish_non_exhaustive()
    }
}

impl PwsSystem for FnSystem {
    fn dim(&self) -> usize {
        self.dim
    }

    fn f_plus(&self, x: &[f64], out: &mut [f64]) {
        (self.f_plus)(x, out)
    }

    fn f_minus(&self, x: &[f64], out: &mut [f64]) {
        (self.f_minus)(x, out)
    }

    fn sigma(&self, x: &[f64]) -> f64 {
        (self.sigma)(x)
    }

    fn grad_sigma(&self, x: &[f64], out: &mut [f64]) {
        match &self.grad_sigma {
            Some(g) => g(x, out),
            None => central_difference_gradient(|y| (self.sigma)(y), x, out),
        }
    }

    fn name(&self) -> &str {
        &self.name
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fold() -> FnSystem {
        // Quadratic fold of f+ at the origin, f- pointing straight down.
        FnSystem::new(
            "fold",
            2,
            |x, o| {
                o[0] = 1.0;
                o[1] = x[0];
            },
            |_, o| {
                o[0] = 0.0;
                o[1] = -1.0;
            },
            |x| x[1],
        )
    }

    #[test]
    fn lambda_identity_on_the_surface() {
        let sys = fold();
        let tol = Tolerances::default();
        for x0 in [-2.0, -0.3, 0.7, 3.0] {
            let nd = normal_components(&sys, &[x0, 0.0], &tol).unwrap();
            let l = nd.lambda_s.unwrap();
            let residual = l * nd.h_plus + (1.0 - l) * nd.h_minus;
            assert!(residual.abs() <= 1e-12 * (nd.h_plus.abs() + nd.h_minus.abs()));
        }
    }

    #[test]
    fn degenerate_lambda_is_reported() {
        let sys = FnSystem::new(
            "parallel",
            2,
            |_, o| {
                o[0] = 1.0;
                o[1] = 0.5;
            },
            |_, o| {
                o[0] = -1.0;
                o[1] = 0.5;
            },
            |x| x[1],
        );
        let tol = Tolerances::default();
        let nd = normal_components(&sys, &[0.0, 0.0], &tol).unwrap();
        assert_eq!(nd.lambda_s, None);
        assert!(matches!(
            sliding_field(&sys, &[0.0, 0.0], &tol),
            Err(PwsError::DegenerateDenominator { .. })
        ));
    }

    #[test]
    fn non_finite_field_names_the_culprit() {
        let sys = FnSystem::new(
            "bad",
            2,
            |_, o| {
                o[0] = f64::NAN;
                o[1] = 0.0;
            },
            |_, o| {
                o[0] = 0.0;
                o[1] = 0.0;
            },
            |x| x[1],
        );
        let err = normal_components(&sys, &[0.0, 0.0], &Tolerances::default()).unwrap_err();
        assert_eq!(
            err,
            PwsError::NonFinite {
                field: Field::FPlus,
                x: vec![0.0, 0.0]
            }
        );
    }

    #[test]
    fn off_surface_point_is_rejected() {
        let err = classify_surface_point(&fold(), &[0.0, 0.5], &Tolerances::default()).unwrap_err();
        assert!(matches!(err, PwsError::OffSurface { .. }));
    }

    #[test]
    fn fold_classification_and_curvature() {
        let sys = fold();
        let tol = Tolerances::default();
        // h+ = x0, h- = -1
        assert_eq!(
            classify_surface_point(&sys, &[-1.0, 0.0], &tol).unwrap(),
            SurfaceRegime::Crossing
        );
        assert_eq!(
            classify_surface_point(&sys, &[1.0, 0.0], &tol).unwrap(),
            SurfaceRegime::RepellingSliding
        );
        assert_eq!(
            classify_surface_point(&sys, &[0.0, 0.0], &tol).unwrap(),
            SurfaceRegime::TangencyPlus
        );
        // (f+·∂)^2 sigma = f+·∇(x0) = 1
        let c = quadratic_tangency_check(&sys, &[0.0, 0.0], Branch::Plus).unwrap();
        assert!((c - 1.0).abs() < 1e-8, "{c}");
        assert!(is_departing(&sys, &[0.0, 0.0], Branch::Plus, &tol).unwrap());
        assert!(is_departing(&sys, &[0.0, 0.0], Branch::Minus, &tol).unwrap());
        assert!(!is_departing(&sys, &[-1.0, 0.0], Branch::Plus, &tol).unwrap());
    }

    #[test]
    fn affine_sigma_under_constant_field_has_no_curvature() {
        let sys = FnSystem::new(
            "const",
            3,
            |_, o| o.copy_from_slice(&[1.0, -2.0, 0.5]),
            |_, o| o.copy_from_slice(&[0.0, 0.0, -1.0]),
            |x| 2.0 * x[0] + x[1] - 3.0,
        );
        let c = quadratic_tangency_check(&sys, &[1.0, 1.0, 0.0], Branch::Plus).unwrap();
        assert!(c.abs() < 1e-9, "{c}");
    }

    #[test]
    fn inclusion_element_spans_the_segment() {
        let sys = fold();
        let x = [0.5, 0.0];
        let e0 = inclusion_element(&sys, &x, 0.0).unwrap();
        let e1 = inclusion_element(&sys, &x, 1.0).unwrap();
        let e3 = inclusion_element(&sys, &x, 3.0).unwrap();
        assert_eq!(e0, sys.field(Branch::Minus, &x).unwrap());
        assert_eq!(e1, sys.field(Branch::Plus, &x).unwrap());
        assert_eq!(e3, vec![3.0, 3.0 * 0.5 + 2.0]);
    }
}
