//! Robust data-driven MPC with input-affine disturbance tightening.
//!
//! The controller only sees measured input/state (or input/output) data.
//! Plant matrices live in [`plant`] for simulation and oracle checks.

pub mod constants;
pub mod convex;
pub mod error;
pub mod linalg;
pub mod mpc;
pub mod ocp;
pub mod plant;
pub mod scenario;
pub mod signals;
pub mod tightening;

pub use error::{Error, Result};
