//! File formats, experiment sweeps and policy comparison on top of
//! `platoon-core`. The `platoon` binary wraps these.

pub mod checkpoint;
pub mod compare;
pub mod config;
pub mod error;
pub mod experiment;
pub mod training;

pub use error::{Error, Result};
