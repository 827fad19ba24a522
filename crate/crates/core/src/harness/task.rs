//! Reference trajectories for the benchmark tasks.

use nalgebra::{DVector, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::Config;
use crate::error::{Error, Result};
use crate::linmodel::NX;
use crate::sim::{DisturbancePulse, DisturbanceProfile};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaskKind {
    Hover,
    /// T1: 3 cm ramp on all axes over 1 s.
    Ramp,
    /// T2: the ramp with force and torque pulses.
    DisturbedRamp,
    /// T3: 5 cm circle in the x-z plane at 5.2 cm/s.
    Circle,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryTask {
    pub kind: TaskKind,
    pub ramp_amplitude: f64,
    pub ramp_duration: f64,
    pub circle_radius: f64,
    pub circle_speed: f64,
    /// Hover time at the start point before the lap begins.
    pub circle_lead: f64,
    pub duration: f64,
}

impl TrajectoryTask {
    pub fn new(kind: TaskKind) -> Self {
        let duration = match kind {
            TaskKind::Hover => 3.0,
            TaskKind::Ramp => 3.0,
            TaskKind::DisturbedRamp => 6.0,
            TaskKind::Circle => 7.5,
        };
        Self {
            kind,
            ramp_amplitude: 0.03,
            ramp_duration: 1.0,
            circle_radius: 0.05,
            circle_speed: 0.052,
            circle_lead: 0.75,
            duration,
        }
    }

    /// Accepts `hover`, `t1`/`ramp`, `t2`/`disturbed_ramp`, `t3`/`circle`.
    pub fn from_name(name: &str) -> Result<Self> {
        let kind = match name {
            "hover" => TaskKind::Hover,
            "t1" | "ramp" => TaskKind::Ramp,
            "t2" | "disturbed_ramp" => TaskKind::DisturbedRamp,
            "t3" | "circle" => TaskKind::Circle,
            other => return Err(Error::Config(format!("unknown task {other:?}"))),
        };
        Ok(Self::new(kind))
    }

    pub fn name(&self) -> &'static str {
        match self.kind {
            TaskKind::Hover => "hover",
            TaskKind::Ramp => "t1",
            TaskKind::DisturbedRamp => "t2",
            TaskKind::Circle => "t3",
        }
    }

    pub fn circle_period(&self) -> f64 {
        2.0 * std::f64::consts::PI * self.circle_radius / self.circle_speed
    }

    /// Desired position and velocity at time `t`; held constant after the
    /// end of the task.
    pub fn desired(&self, t: f64) -> (Vector3<f64>, Vector3<f64>) {
        let t = t.clamp(0.0, self.duration);
        match self.kind {
            TaskKind::Hover => (Vector3::zeros(), Vector3::zeros()),
            TaskKind::Ramp | TaskKind::DisturbedRamp => {
                let a = self.ramp_amplitude;
                if t < self.ramp_duration {
                    let s = a / self.ramp_duration;
                    (Vector3::repeat(s * t), Vector3::repeat(s))
                } else {
                    (Vector3::repeat(a), Vector3::zeros())
                }
            }
            TaskKind::Circle => {
                let r = self.circle_radius;
                let w = self.circle_speed / r;
                let lap_end = self.circle_lead + self.circle_period();
                let tau = t.clamp(self.circle_lead, lap_end) - self.circle_lead;
                let th = -std::f64::consts::FRAC_PI_2 + w * tau;
                let p = Vector3::new(r * th.cos(), 0.0, r + r * th.sin());
                let moving = t >= self.circle_lead && t < lap_end;
                let v = if moving { Vector3::new(-r * w * th.sin(), 0.0, r * w * th.cos()) } else { Vector3::zeros() };
                (p, v)
            }
        }
    }

    /// Desired linear-model state: position and velocity, zero attitude.
    pub fn desired_state(&self, t: f64) -> DVector<f64> {
        let (p, v) = self.desired(t);
        let mut x = DVector::zeros(NX);
        x.rows_mut(0, 3).copy_from(&p);
        x.rows_mut(3, 3).copy_from(&v);
        x
    }

    /// `N + 1` desired states starting at outer step `k`.
    pub fn reference_window(&self, k: usize, tc: f64, n: usize) -> Vec<DVector<f64>> {
        (0..=n).map(|i| self.desired_state((k + i) as f64 * tc)).collect()
    }

    pub fn outer_steps(&self, tc: f64) -> usize {
        (self.duration / tc).round() as usize
    }

    /// The disturbance the task is flown with. Only T2 has one: three
    /// 50 ms force pulses in random horizontal directions, each with a
    /// horizontal torque pulse, placed one per 1.5 s slot between 1 s and
    /// 5.5 s.
    pub fn disturbance(&self, cfg: &Config, seed: u64) -> DisturbanceProfile {
        if self.kind != TaskKind::DisturbedRamp {
            return DisturbanceProfile::none();
        }
        let params = cfg.physical();
        let force = cfg.pulse_force_frac * params.weight();
        let torque = cfg.pulse_torque_frac * params.max_roll_torque(&cfg.calibration());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pulses = Vec::new();
        let slot = 1.5;
        for i in 0..3 {
            let start = 1.0 + slot * i as f64 + rng.random::<f64>() * (slot - cfg.pulse_duration);
            let a = rng.random::<f64>() * std::f64::consts::TAU;
            let b = rng.random::<f64>() * std::f64::consts::TAU;
            pulses.push(DisturbancePulse {
                start,
                duration: cfg.pulse_duration,
                force: Vector3::new(a.cos(), a.sin(), 0.0) * force,
                torque: Vector3::new(b.cos(), b.sin(), 0.0) * torque,
            });
        }
        DisturbanceProfile { pulses, ..DisturbanceProfile::none() }
    }
}
