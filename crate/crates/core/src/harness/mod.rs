//! Benchmark tasks, the closed-loop cascade and tracking metrics.

pub mod cascade;
pub mod compare;
pub mod metrics;
pub mod task;

pub use cascade::{
    collect_demonstration, fit_attitude_loop, run_closed_loop, ControllerStack, InnerLoop, OuterController,
    PolicyController, RunOptions, RunResult, TrajectoryLog,
};
pub use metrics::{MetricAccumulator, RunMetrics};
pub use task::{TaskKind, TrajectoryTask};
