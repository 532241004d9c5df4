#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod error;
pub mod numerics;

pub use error::{Error, Result};

/// Crate version recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
pub mod attention;
pub mod neuron;
pub mod model;
pub mod equilibrium;
pub mod gradients;
pub mod train;
pub mod distill;
pub mod energy;
