//! Position tracking metrics.

use nalgebra::Vector3;

/// Per-axis errors over the samples with `t >= t0`. MAE is the maximum
/// absolute error, so `rmse <= mae` always.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunMetrics {
    pub rmse: [f64; 3],
    pub mae: [f64; 3],
    pub t0: f64,
    /// Length of the metric window [s].
    pub window: f64,
    pub samples: usize,
    pub infeasible_steps: usize,
    pub saturation_count: usize,
    pub clamp_count: usize,
}

impl RunMetrics {
    pub fn max_mae(&self) -> f64 {
        self.mae.iter().copied().fold(0.0, f64::max)
    }

    pub fn max_rmse(&self) -> f64 {
        self.rmse.iter().copied().fold(0.0, f64::max)
    }
}

/// Accumulates squared and absolute errors sample by sample.
#[derive(Clone, Debug)]
pub struct MetricAccumulator {
    t0: f64,
    sum_sq: Vector3<f64>,
    max_abs: Vector3<f64>,
    count: usize,
    first: Option<f64>,
    last: f64,
}

impl MetricAccumulator {
    pub fn new(t0: f64) -> Self {
        Self { t0, sum_sq: Vector3::zeros(), max_abs: Vector3::zeros(), count: 0, first: None, last: t0 }
    }

    pub fn push(&mut self, t: f64, error: &Vector3<f64>) {
        if t < self.t0 {
            return;
        }
        self.sum_sq += error.component_mul(error);
        self.max_abs = self.max_abs.sup(&error.abs());
        self.count += 1;
        self.first.get_or_insert(t);
        self.last = t;
    }

    pub fn finish(&self) -> RunMetrics {
        let n = self.count.max(1) as f64;
        let rmse = (self.sum_sq / n).map(f64::sqrt);
        let mut m = RunMetrics {
            rmse: rmse.into(),
            mae: self.max_abs.into(),
            t0: self.t0,
            window: self.first.map_or(0.0, |f| self.last - f),
            samples: self.count,
            ..Default::default()
        };
        // Rounding can put a constant-error RMSE one ulp above the max.
        for i in 0..3 {
            m.rmse[i] = m.rmse[i].min(m.mae[i]);
        }
        m
    }
}
