#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod baseline;
pub mod episode;
pub mod error;
pub mod exec;
pub mod longitudinal;
pub mod math;
pub mod nn;
pub mod observe;
pub mod qmix;
pub mod sim;
pub mod verify;

pub use error::{Error, Result};
