//! Lane-change execution: reference planning and MPC tracking.

pub mod mpc;
pub mod planner;
pub mod tracker;
