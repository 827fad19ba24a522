use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("state became non-finite: {0}")]
    NonFiniteState(String),
    #[error("matrix is not skew-symmetric (asymmetry {0:e})")]
    NotSkew(f64),
    #[error("rotation too close to gimbal lock (|R[2,0]| = {0})")]
    GimbalLock(f64),
    #[error("iteration did not converge after {iterations} steps (last change {last_change:e})")]
    NoConvergence { iterations: usize, last_change: f64 },
    #[error("pair (A, B) is not stabilizable: {0}")]
    NotStabilizable(String),
    #[error("tube rollout diverged (|x| = {0:e})")]
    Divergence(f64),
    #[error("tightened constraint set is empty in dimension {dim} ({lo} > {hi})")]
    EmptyTightenedSet { dim: usize, lo: f64, hi: f64 },
    #[error("QP infeasible: {0}")]
    Infeasible(String),
    #[error("QP solver hit the iteration cap ({0})")]
    MaxIter(usize),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("training loss became non-finite at epoch {0}")]
    NonFiniteLoss(usize),
    #[error("unsupported or corrupted file format: {0}")]
    FormatVersionMismatch(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
