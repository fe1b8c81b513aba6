use alloc::string::String;

use crate::sim::VehicleId;

/// Errors raised across the platooning stack.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("non-finite state while integrating vehicle {0}")]
    Integration(VehicleId),
    #[error("no control input supplied for active vehicle {0}")]
    MissingControl(VehicleId),
    #[error("unknown vehicle {0}")]
    UnknownVehicle(VehicleId),
    #[error("car-following gap must be positive, got {0}")]
    NonPositiveGap(f64),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("agent count mismatch: network built for {expected} agents, got {found}")]
    AgentCountMismatch { expected: usize, found: usize },
    #[error("singular boundary-value system (t_f = {0})")]
    SingularPlan(f64),
    #[error("QP solver stopped after {iterations} iterations with KKT residual {residual:e}")]
    SolverNotConverged { iterations: usize, residual: f64 },
    #[error("training diverged: {0}")]
    Training(String),
    #[error("episode trace is empty")]
    EmptyTrace,
}

pub type Result<T, E = Error> = core::result::Result<T, E>;
