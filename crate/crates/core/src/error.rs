use thiserror::Error;

use crate::system::Field;

/// Errors raised while evaluating or integrating a piecewise-smooth system.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum PwsError {
    #[error("{field} returned a non-finite value at x = {x:?}")]
    NonFinite { field: Field, x: Vec<f64> },

    #[error("state has dimension {got}, system expects {expected}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("sliding coefficient undefined at x = {x:?}: (f- - f+).grad(sigma) = {denominator:e}")]
    DegenerateDenominator { x: Vec<f64>, denominator: f64 },

    #[error("point is off the switching surface: |sigma| = {sigma:e} > band {band:e}")]
    OffSurface { sigma: f64, band: f64 },

    #[error(
        "cannot classify surface point x = {x:?} (h+ = {h_plus:e}, h- = {h_minus:e}): {reason}"
    )]
    Unclassifiable {
        x: Vec<f64>,
        h_plus: f64,
        h_minus: f64,
        reason: &'static str,
    },

    #[error("step size underflow at t = {t}, x = {x:?}")]
    StepUnderflow { t: f64, x: Vec<f64> },

    #[error(
        "sliding coefficient left [0, 1] without a located exit at t = {t} (lambda = {lambda})"
    )]
    EventMiss { t: f64, lambda: f64 },

    #[error("orbit is chattering at t = {t}: {count} consecutive events without time progress")]
    Chattering { t: f64, count: usize },

    #[error("no grazing found along the orbit from {p:?}")]
    GrazingNotFound { p: Vec<f64> },

    #[error("tangency at {x:?} is not quadratic (second Lie derivative {value:e})")]
    NotQuadratic { x: Vec<f64>, value: f64 },

    #[error(
        "orbit from {p:?} does not reach a double tangency through sliding (ended with {ended})"
    )]
    NoDoubleTangency { p: Vec<f64>, ended: String },

    #[error("no sticking region adjoins the tangency at {x:?}")]
    NoStickingRegion { x: Vec<f64> },

    #[error("orbit {index}: {source}")]
    Orbit { index: usize, source: Box<PwsError> },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

pub type Result<T, E = PwsError> = std::result::Result<T, E>;
