//! Robust tube model-predictive trajectory tracking for an insect-scale
//! flapping-wing MAV, in simulation.
//!
//! The crate is organised bottom-up:
//!
//! - [`sim`]: nonlinear rigid-body plant, mixer and actuator calibration.
//! - [`attitude`]: geometric attitude controller and the steady-state
//!   Kalman torque observer.
//! - [`linmodel`]: hover linearization, ZOH discretization, box sets.
//! - [`rtmpc`]: LQR, Monte-Carlo tube, constraint tightening, the tracking
//!   QP, the ancillary law and conversion to attitude setpoints.
//! - [`imitation`]: demonstration collection and tube-based augmentation.
//! - [`mlp`]: the feed-forward policy, backprop and ADAM.
//! - [`harness`]: reference tasks, closed-loop evaluation and metrics.

pub mod attitude;
pub mod config;
pub mod error;
pub mod harness;
pub mod imitation;
pub mod linalg;
pub mod linmodel;
pub mod mlp;
pub mod rtmpc;
pub mod sim;

pub use error::{Error, Result};
