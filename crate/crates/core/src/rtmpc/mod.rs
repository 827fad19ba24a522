//! Outer loop: robust tube MPC on the hover model and the conversion of its
//! commands into attitude setpoints.

pub mod compensate;
pub mod lqr;
pub mod mpc;
pub mod qp;
pub mod tube;

pub use compensate::{compensate, euler_rate_matrix, setpoints, CompensatedCommand, EulerRateMap};
pub use lqr::{dare_residual, lqr_design, LqrSolution};
pub use mpc::{ancillary, ControlOutput, CostParams, RtmpcController, SafePlan, TrackingQp, TubeController};
pub use qp::{DenseQp, QpSolution};
pub use tube::{compute_tube, gain_image_hull, tighten, TubeConfig, TubeSampling};
