//! Schrödinger bridge solvers: iterative proportional fitting with learned
//! forward and backward diffusions, plus closed-form Gaussian and
//! discrete-grid references.
//!
//! The crate is `no_std` (it needs `alloc`). IO, configuration files and the
//! command line live in the companion `dsb` crate.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod analytic_gauss;
pub mod approximator;
pub mod bench;
pub mod diffusion;
pub mod discrete_ipf;
pub mod dsb;
pub mod likelihood;
pub mod numerics;

pub use approximator::{Activation, NetSpec, Network};
pub use numerics::{PointSampler, RngState, StepSchedule};
