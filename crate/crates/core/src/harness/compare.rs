//! Seed sweeps and the AVG/MIN/MAX comparison table.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::harness::cascade::{run_closed_loop, ControllerStack, OuterController, PolicyController, RunOptions};
use crate::harness::metrics::RunMetrics;
use crate::harness::task::TrajectoryTask;
use crate::mlp::MlpPolicy;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ControllerKind {
    Rtmpc,
    Policy,
}

impl ControllerKind {
    pub fn name(self) -> &'static str {
        match self {
            ControllerKind::Rtmpc => "rtmpc",
            ControllerKind::Policy => "policy",
        }
    }
}

impl std::str::FromStr for ControllerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rtmpc" => Ok(Self::Rtmpc),
            "policy" => Ok(Self::Policy),
            other => Err(Error::Config(format!("unknown controller {other:?}"))),
        }
    }
}

/// One run of `kind` on `task` with the task's disturbance for `seed`.
pub fn run_seed(
    stack: &ControllerStack,
    kind: ControllerKind,
    policy: Option<&MlpPolicy>,
    task: &TrajectoryTask,
    seed: u64,
) -> Result<RunMetrics> {
    let opts = RunOptions::new(stack.cfg.observer, task.disturbance(&stack.cfg, seed));
    let mut ctrl: Box<dyn OuterController> = match kind {
        ControllerKind::Rtmpc => Box::new(stack.rtmpc()),
        ControllerKind::Policy => {
            let net = policy.ok_or_else(|| Error::Config("policy controller needs weights".into()))?;
            Box::new(PolicyController::new(net.clone(), stack.input_box().clone()))
        }
    };
    Ok(run_closed_loop(stack, ctrl.as_mut(), task, &opts)?.metrics)
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Stat {
    pub avg: f64,
    pub min: f64,
    pub max: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self { avg: f64::NAN, min: f64::NAN, max: f64::NAN };
        }
        let avg = values.iter().sum::<f64>() / values.len() as f64;
        let min = values.iter().copied().fold(f64::INFINITY, f64::min);
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        // Keep MIN <= AVG <= MAX exact despite summation rounding.
        Self { avg: avg.clamp(min, max), min, max }
    }
}

/// Per-axis statistics of one task/controller cell.
#[derive(Clone, Debug, PartialEq)]
pub struct CompareRow {
    pub task: String,
    pub controller: String,
    pub rmse: [Stat; 3],
    pub mae: [Stat; 3],
    pub runs: usize,
    pub failed: Vec<String>,
    pub infeasible_steps: usize,
}

pub fn summarize(task: &str, controller: &str, results: &[Result<RunMetrics>]) -> CompareRow {
    let ok: Vec<&RunMetrics> = results.iter().filter_map(|r| r.as_ref().ok()).collect();
    let failed = results.iter().filter_map(|r| r.as_ref().err().map(|e| e.to_string())).collect();
    let axis = |f: &dyn Fn(&RunMetrics) -> [f64; 3], i: usize| Stat::of(&ok.iter().map(|m| f(m)[i]).collect::<Vec<_>>());
    CompareRow {
        task: task.to_string(),
        controller: controller.to_string(),
        rmse: [0, 1, 2].map(|i| axis(&|m| m.rmse, i)),
        mae: [0, 1, 2].map(|i| axis(&|m| m.mae, i)),
        runs: results.len(),
        failed,
        infeasible_steps: ok.iter().map(|m| m.infeasible_steps).sum(),
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ComparisonTable {
    pub rows: Vec<CompareRow>,
}

impl ComparisonTable {
    pub fn any_failed(&self) -> bool {
        self.rows.iter().any(|r| !r.failed.is_empty())
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("task,controller,metric,axis,avg,min,max,runs,failed,infeasible_steps\n");
        for r in &self.rows {
            for (metric, stats) in [("rmse", &r.rmse), ("mae", &r.mae)] {
                for (i, st) in stats.iter().enumerate() {
                    s.push_str(&format!(
                        "{},{},{},{},{},{},{},{},{},{}\n",
                        r.task,
                        r.controller,
                        metric,
                        ["x", "y", "z"][i],
                        st.avg,
                        st.min,
                        st.max,
                        r.runs,
                        r.failed.len(),
                        r.infeasible_steps
                    ));
                }
            }
        }
        s
    }

    /// Console table in centimetres.
    pub fn to_console(&self) -> String {
        let mut s = format!(
            "{:<5} {:<7} {:<5} {:>22} {:>22} {:>22}\n",
            "task", "ctrl", "", "x AVG/MIN/MAX [cm]", "y AVG/MIN/MAX [cm]", "z AVG/MIN/MAX [cm]"
        );
        for r in &self.rows {
            for (metric, stats) in [("RMSE", &r.rmse), ("MAE", &r.mae)] {
                let cells: Vec<String> = stats
                    .iter()
                    .map(|st| format!("{:.2}/{:.2}/{:.2}", st.avg * 100.0, st.min * 100.0, st.max * 100.0))
                    .collect();
                s.push_str(&format!(
                    "{:<5} {:<7} {:<5} {:>22} {:>22} {:>22}\n",
                    r.task, r.controller, metric, cells[0], cells[1], cells[2]
                ));
            }
            for f in &r.failed {
                s.push_str(&format!("{:<5} {:<7} FAILED {f}\n", r.task, r.controller));
            }
        }
        s
    }
}

/// Runs every task/controller pair over seeds `base_seed .. base_seed + n`,
/// in parallel across seeds. A failing run marks its cell instead of
/// aborting the sweep.
pub fn compare(
    stack: &ControllerStack,
    policy: Option<&MlpPolicy>,
    tasks: &[TrajectoryTask],
    controllers: &[ControllerKind],
    n_seeds: usize,
    base_seed: u64,
) -> ComparisonTable {
    let mut table = ComparisonTable::default();
    for task in tasks {
        for &kind in controllers {
            let results: Vec<Result<RunMetrics>> = (0..n_seeds as u64)
                .into_par_iter()
                .map(|i| run_seed(stack, kind, policy, task, base_seed + i))
                .collect();
            table.rows.push(summarize(task.name(), kind.name(), &results));
        }
    }
    table
}

#[cfg(test)]
mod tests {
    use super::*;

    fn metrics(r: [f64; 3], m: [f64; 3]) -> RunMetrics {
        RunMetrics { rmse: r, mae: m, ..Default::default() }
    }

    #[test]
    fn single_run_row_equals_metrics() {
        let m = metrics([0.1, 0.2, 0.3], [0.4, 0.5, 0.6]);
        let row = summarize("t1", "rtmpc", &[Ok(m.clone())]);
        for i in 0..3 {
            assert_eq!(row.rmse[i], Stat { avg: m.rmse[i], min: m.rmse[i], max: m.rmse[i] });
            assert_eq!(row.mae[i].avg, m.mae[i]);
        }
    }

    #[test]
    fn order_statistics_and_failures() {
        let rs = vec![
            Ok(metrics([0.1, 0.2, 0.3], [1.0; 3])),
            Err(Error::Divergence(1e7)),
            Ok(metrics([0.3, 0.1, 0.3], [2.0; 3])),
            Ok(metrics([0.2, 0.7, 0.3], [3.0; 3])),
        ];
        let row = summarize("t2", "policy", &rs);
        assert_eq!(row.failed.len(), 1);
        for st in row.rmse.iter().chain(row.mae.iter()) {
            assert!(st.min <= st.avg && st.avg <= st.max);
        }
        let table = ComparisonTable { rows: vec![row] };
        assert!(table.any_failed());
        assert_eq!(table.to_csv().lines().count(), 1 + 6);
        assert!(table.to_console().contains("FAILED"));
    }
}
