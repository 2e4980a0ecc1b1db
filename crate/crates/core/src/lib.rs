//! Structure-preserving integration of rigid-body gravitational systems on
//! SE(3)^N, flat-space baselines, and learning of residual potentials and
//! forcings by differentiating through composed integrator steps.

pub mod error;
pub(crate) mod kernels;

pub mod autodiff;
pub mod config;
pub mod geometry;
pub mod integrators;
pub mod learning;
pub mod metrics;
pub mod potentials;
pub mod rigidbody;

pub use error::{Error, Result};
