//! Simulation of Filippov systems: piecewise-smooth vector fields switching
//! across a surface `sigma(x) = 0`, closed on the surface by the sliding
//! field, with event-located integration and set-valued continuation through
//! grazings and double tangencies.

pub mod error;
pub mod explosion;
pub mod integrator;
mod rk;
pub mod scenarios;
pub mod system;

pub use error::{PwsError, Result};
pub use explosion::{
    build_double_tangency_explosion, build_grazing_explosion, hausdorff,
    run_nondeterministic_ensemble, BranchPolicy, BranchSelector, BundleMember, Exclusion,
    ExclusionReason, ExplosionBundle, ExplosionKind,
};
pub use integrator::{
    detect_grazing, flow_free, flow_sliding, flow_smooth, grazing_indicator, integrate_orbit,
    step_surface, Event, EventKind, FlowState, GrazingCandidate, IntegratorConfig, Region,
    Selection, SmoothSystem, SurfaceStep, TerminateReason, Trajectory,
};
pub use system::{
    classify_normals, classify_surface_point, inclusion_element, is_departing, normal_components,
    quadratic_tangency_check, sliding_field, Branch, Field, FnSystem, NormalData, PwsSystem,
    PwsSystemExt, SurfaceRegime, Tolerances,
};
