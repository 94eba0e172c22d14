//! Mixed-traffic platoon simulation with additive smoothing controllers for
//! automated vehicles, sensitivity-based tuning of the controller parameters,
//! and mobility/energy metrics.

// `!(x > 0.0)` is used on purpose so NaN inputs are rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod controller;
pub mod dynamics;
pub mod error;
pub mod integrate;
pub mod metrics;
pub mod optimizer;
pub mod simulator;
pub mod study;

pub use controller::{ControllerParams, SafetyEnvelope, Sigmoid, SmoothingLaw, TsTrcParams};
pub use dynamics::{CarFollowingInput, IdmParams, ModelKind, OvrvParams};
pub use error::{Error, Result};
pub use integrate::Integrator;
pub use metrics::{FuelCoefficients, MetricsReport};
pub use optimizer::{OptimizationTrace, OptimizerConfig, TuneResult};
pub use simulator::{
    ControllerConfig, ControllerKind, LeadProfile, PlatoonState, Scenario, SensitivityMode,
    Simulator, Trajectory, VehicleKind,
};
