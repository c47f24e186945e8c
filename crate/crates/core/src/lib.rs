//! Differentiable safe-corridor trajectory optimization.
//!
//! The crate plans minimum-jerk piecewise quintic trajectories inside cube
//! corridors, differentiates the optimizer through its KKT conditions, and
//! trains a corridor-generation policy built on a motion-primitive library.
//! A small simulation stack (synthetic worlds, range sensing, receding-
//! horizon replanning) provides data generation and evaluation.

pub mod corridor;
pub mod error;
pub(crate) mod linalg;
pub mod solver;
pub mod traj;

pub use error::{CoreError, Result};
