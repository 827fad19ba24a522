//! Python bindings: configuration, tube computation and closed-loop runs.

use std::collections::HashMap;
use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use tubefly::config::Config;
use tubefly::harness::{run_closed_loop, ControllerStack, OuterController, PolicyController, RunOptions, TrajectoryTask};
use tubefly::mlp::MlpPolicy;
use tubefly::Error;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Config(_) | Error::DimensionMismatch { .. } | Error::FormatVersionMismatch(_) => PyValueError::new_err(e.to_string()),
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn config_with(overrides: &[String]) -> tubefly::Result<Config> {
    let mut cfg = Config::default();
    for kv in overrides {
        let (k, v) = kv.split_once('=').ok_or_else(|| Error::Config(format!("expected KEY=VALUE, got {kv:?}")))?;
        cfg.set(k.trim(), v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn tube_impl(overrides: &[String]) -> tubefly::Result<Vec<(String, f64, f64)>> {
    let stack = ControllerStack::build(&config_with(overrides)?)?;
    let text = tubefly::rtmpc::tube::tube_to_text(&stack.tube.z);
    text.lines()
        .map(|l| {
            let mut it = l.split_whitespace();
            let name = it.next().unwrap_or_default().to_string();
            let mut num = || it.next().and_then(|t| t.parse::<f64>().ok()).ok_or_else(|| Error::Config(format!("bad tube line {l:?}")));
            Ok((name, num()?, num()?))
        })
        .collect()
}

fn simulate_impl(task: &str, seed: u64, weights: Option<PathBuf>, overrides: &[String]) -> tubefly::Result<HashMap<String, f64>> {
    let cfg = config_with(overrides)?;
    let stack = ControllerStack::build(&cfg)?;
    let task = TrajectoryTask::from_name(task)?;
    let mut ctrl: Box<dyn OuterController> = match weights {
        Some(p) => Box::new(PolicyController::new(MlpPolicy::read(&p)?, stack.input_box().clone())),
        None => Box::new(stack.rtmpc()),
    };
    let opts = RunOptions::new(cfg.observer, task.disturbance(&cfg, seed));
    let m = run_closed_loop(&stack, ctrl.as_mut(), &task, &opts)?.metrics;
    let mut out = HashMap::new();
    for (i, axis) in ["x", "y", "z"].iter().enumerate() {
        out.insert(format!("rmse_{axis}"), m.rmse[i]);
        out.insert(format!("mae_{axis}"), m.mae[i]);
    }
    out.insert("window".into(), m.window);
    out.insert("infeasible_steps".into(), m.infeasible_steps as f64);
    out.insert("saturation_count".into(), m.saturation_count as f64);
    out.insert("clamp_count".into(), m.clamp_count as f64);
    Ok(out)
}

/// Effective parameters as `(key, value)` pairs after applying overrides.
#[pyfunction]
#[pyo3(signature = (overrides = Vec::new()))]
fn config_entries(overrides: Vec<String>) -> PyResult<Vec<(String, String)>> {
    Ok(config_with(&overrides).map_err(to_py)?.entries())
}

/// Tube half-widths as `(state, lo, hi)` triples.
#[pyfunction]
#[pyo3(signature = (overrides = Vec::new()))]
fn tube(overrides: Vec<String>) -> PyResult<Vec<(String, f64, f64)>> {
    tube_impl(&overrides).map_err(to_py)
}

/// Flies one task and returns its metrics. Uses RTMPC unless `weights`
/// names a policy file.
#[pyfunction]
#[pyo3(signature = (task, seed = 0, weights = None, overrides = Vec::new()))]
fn simulate(py: Python<'_>, task: &str, seed: u64, weights: Option<PathBuf>, overrides: Vec<String>) -> PyResult<HashMap<String, f64>> {
    py.detach(|| simulate_impl(task, seed, weights, &overrides)).map_err(to_py)
}

/// Length of the policy input for a horizon of `horizon` steps.
#[pyfunction]
fn policy_input_len(horizon: usize) -> usize {
    tubefly::imitation::policy_input_len(horizon)
}

#[pymodule]
fn tubefly_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(config_entries, m)?)?;
    m.add_function(wrap_pyfunction!(tube, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(policy_input_len, m)?)?;
    Ok(())
}
