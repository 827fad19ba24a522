//! Flat `key = value` configuration with every default in one place.
//!
//! Lines starting with `#` are comments. Unknown keys are rejected so typos
//! do not silently fall back to defaults. Matrices are given row-major under
//! dotted keys (`J.xx`, `J.xy`, ...), vectors under indexed keys
//! (`alpha.0` ... `alpha.3`).

use std::path::Path;

use nalgebra::{DVector, Matrix3, Vector3, Vector4};

use crate::attitude::{AttitudeGains, ObserverConfig};
use crate::error::{Error, Result};
use crate::mlp::TrainConfig;
use crate::linmodel::{AttitudeLoopParams, BoxSet, INPUT_NAMES, NX, STATE_NAMES};
use crate::rtmpc::{CostParams, EulerRateMap, TubeConfig, TubeSampling};
use crate::sim::{ActuatorCalibration, PhysicalParams};

const AXES: [&str; 3] = ["x", "y", "z"];

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub mass: f64,
    pub gravity: f64,
    pub inertia: [[f64; 3]; 3],
    pub drag_lin: f64,
    pub drag_rot: f64,
    pub arm_x: f64,
    pub arm_y: f64,
    pub alpha: [f64; 4],
    pub beta: [f64; 4],
    pub f_min: f64,
    /// Per-actuator lift limit as a fraction of the vehicle weight.
    pub f_max_frac: f64,

    pub ts: f64,
    pub seed: u64,

    pub att_wn: f64,
    pub att_zeta: f64,
    pub obs_q_rate: f64,
    pub obs_q_torque: f64,
    pub obs_r_meas: f64,
    pub observer: bool,

    /// Closed-loop attitude parameters; fitted from the simulated inner loop
    /// when absent.
    pub k_phi: Option<f64>,
    pub k_theta: Option<f64>,
    pub tau_phi: Option<f64>,
    pub tau_theta: Option<f64>,

    pub horizon: usize,
    pub tc: f64,
    pub fext_frac: f64,
    pub max_tilt_deg: f64,
    pub dfcmd_frac: f64,
    pub rate_max: f64,
    pub vel_max: f64,
    pub pos_max: f64,
    pub q: [f64; NX],
    pub r: [f64; 3],
    pub euler_rate_map: EulerRateMap,

    pub tube_rollouts: usize,
    pub tube_horizon: usize,
    pub tube_seed: u64,
    pub tube_sampling: TubeSampling,

    pub demo_steps: usize,
    pub n_extra: usize,
    pub aug_seed: u64,
    pub epochs: usize,
    pub lr: f64,
    /// End of the cosine learning-rate decay; `None` keeps `lr` constant.
    pub lr_final: Option<f64>,
    pub batch: usize,
    pub hidden: usize,
    pub train_seed: u64,
    pub normalize: bool,

    pub t0: f64,
    pub pulse_force_frac: f64,
    pub pulse_torque_frac: f64,
    pub pulse_duration: f64,
}

impl Default for Config {
    fn default() -> Self {
        let p = PhysicalParams::default();
        let c = ActuatorCalibration::default();
        let j = p.inertia;
        Self {
            mass: p.mass,
            gravity: p.gravity,
            inertia: [[j[(0, 0)], j[(0, 1)], j[(0, 2)]], [j[(1, 0)], j[(1, 1)], j[(1, 2)]], [j[(2, 0)], j[(2, 1)], j[(2, 2)]]],
            drag_lin: p.drag_lin,
            drag_rot: p.drag_rot,
            arm_x: p.arm_x,
            arm_y: p.arm_y,
            alpha: c.alpha.into(),
            beta: c.beta.into(),
            f_min: c.f_min,
            f_max_frac: 0.5,
            ts: 5e-4,
            seed: 0,
            att_wn: 50.0,
            att_zeta: 0.9,
            obs_q_rate: 1e-8,
            obs_q_torque: 2e-22,
            obs_r_meas: 1e-4,
            observer: true,
            k_phi: None,
            k_theta: None,
            tau_phi: None,
            tau_theta: None,
            horizon: 50,
            tc: 0.02,
            fext_frac: 0.15,
            max_tilt_deg: 25.0,
            dfcmd_frac: 0.8,
            rate_max: 100.0,
            vel_max: 2.0,
            pos_max: f64::INFINITY,
            q: [1.0, 1.0, 1.0, 1e-3, 1e-3, 1e-3, 1e-5, 1e-5, 1e-5, 1e-5],
            r: [3e-6, 3e-6, 1e-6],
            euler_rate_map: EulerRateMap::Printed,
            tube_rollouts: 1000,
            tube_horizon: 500,
            tube_seed: 42,
            tube_sampling: TubeSampling::Mixed,
            demo_steps: 350,
            n_extra: 200,
            aug_seed: 7,
            epochs: 15,
            lr: 0.001,
            lr_final: Some(1e-5),
            batch: 256,
            hidden: 32,
            train_seed: 1,
            normalize: true,
            t0: 0.5,
            pulse_force_frac: 0.3,
            pulse_torque_frac: 0.2,
            pulse_duration: 0.05,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse::<T>().map_err(|_| Error::Config(format!("bad value {v:?} for {key}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("bad boolean {v:?} for {key}"))),
    }
}

fn parse_opt(key: &str, v: &str) -> Result<Option<f64>> {
    if v == "fit" {
        Ok(None)
    } else {
        parse(key, v).map(Some)
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "fit".to_string(), |x| x.to_string())
}

impl Config {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        if let Some(rest) = key.strip_prefix("J.") {
            let idx = |c: char| AXES.iter().position(|a| a.starts_with(c));
            let mut ch = rest.chars();
            match (ch.next().and_then(idx), ch.next().and_then(idx), ch.next()) {
                (Some(r), Some(c), None) => self.inertia[r][c] = parse(key, v)?,
                _ => return Err(Error::Config(format!("unknown key {key}"))),
            }
            return Ok(());
        }
        for (prefix, target) in [("alpha.", &mut self.alpha), ("beta.", &mut self.beta)] {
            if let Some(i) = key.strip_prefix(prefix) {
                let i: usize = parse(key, i)?;
                if i >= 4 {
                    return Err(Error::Config(format!("unknown key {key}")));
                }
                target[i] = parse(key, v)?;
                return Ok(());
            }
        }
        if let Some(name) = key.strip_prefix("q.") {
            let i = STATE_NAMES.iter().position(|s| *s == name).ok_or_else(|| Error::Config(format!("unknown key {key}")))?;
            self.q[i] = parse(key, v)?;
            return Ok(());
        }
        if let Some(name) = key.strip_prefix("r.") {
            let i = INPUT_NAMES.iter().position(|s| *s == name).ok_or_else(|| Error::Config(format!("unknown key {key}")))?;
            self.r[i] = parse(key, v)?;
            return Ok(());
        }
        match key {
            "mass" => self.mass = parse(key, v)?,
            "gravity" => self.gravity = parse(key, v)?,
            "drag_lin" => self.drag_lin = parse(key, v)?,
            "drag_rot" => self.drag_rot = parse(key, v)?,
            "arm_x" => self.arm_x = parse(key, v)?,
            "arm_y" => self.arm_y = parse(key, v)?,
            "f_min" => self.f_min = parse(key, v)?,
            "f_max_frac" => self.f_max_frac = parse(key, v)?,
            "ts" => self.ts = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "att_wn" => self.att_wn = parse(key, v)?,
            "att_zeta" => self.att_zeta = parse(key, v)?,
            "obs_q_rate" => self.obs_q_rate = parse(key, v)?,
            "obs_q_torque" => self.obs_q_torque = parse(key, v)?,
            "obs_r_meas" => self.obs_r_meas = parse(key, v)?,
            "observer" => self.observer = parse_bool(key, v)?,
            "k_phi" => self.k_phi = parse_opt(key, v)?,
            "k_theta" => self.k_theta = parse_opt(key, v)?,
            "tau_phi" => self.tau_phi = parse_opt(key, v)?,
            "tau_theta" => self.tau_theta = parse_opt(key, v)?,
            "N" => self.horizon = parse(key, v)?,
            "Tc" => self.tc = parse(key, v)?,
            "fext_frac" => self.fext_frac = parse(key, v)?,
            "max_tilt_deg" => self.max_tilt_deg = parse(key, v)?,
            "dfcmd_frac" => self.dfcmd_frac = parse(key, v)?,
            "rate_max" => self.rate_max = parse(key, v)?,
            "vel_max" => self.vel_max = parse(key, v)?,
            "pos_max" => self.pos_max = parse(key, v)?,
            "euler_rate_map" => self.euler_rate_map = v.parse()?,
            "tube_rollouts" => self.tube_rollouts = parse(key, v)?,
            "tube_horizon" => self.tube_horizon = parse(key, v)?,
            "tube_seed" => self.tube_seed = parse(key, v)?,
            "tube_sampling" => self.tube_sampling = v.parse()?,
            "demo_steps" => self.demo_steps = parse(key, v)?,
            "n_extra" => self.n_extra = parse(key, v)?,
            "aug_seed" => self.aug_seed = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "lr_final" => self.lr_final = if v == "none" { None } else { Some(parse(key, v)?) },
            "batch" => self.batch = parse(key, v)?,
            "hidden" => self.hidden = parse(key, v)?,
            "train_seed" => self.train_seed = parse(key, v)?,
            "normalize" => self.normalize = parse_bool(key, v)?,
            "t0" => self.t0 = parse(key, v)?,
            "pulse_force_frac" => self.pulse_force_frac = parse(key, v)?,
            "pulse_torque_frac" => self.pulse_torque_frac = parse(key, v)?,
            "pulse_duration" => self.pulse_duration = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown key {key}"))),
        }
        Ok(())
    }

    /// All keys with their current values, in file order.
    pub fn entries(&self) -> Vec<(String, String)> {
        let mut e: Vec<(String, String)> = Vec::new();
        let mut push = |k: &str, v: String| e.push((k.to_string(), v));
        push("mass", self.mass.to_string());
        push("gravity", self.gravity.to_string());
        for (r, rn) in AXES.iter().enumerate() {
            for (c, cn) in AXES.iter().enumerate() {
                push(&format!("J.{rn}{cn}"), self.inertia[r][c].to_string());
            }
        }
        push("drag_lin", self.drag_lin.to_string());
        push("drag_rot", self.drag_rot.to_string());
        push("arm_x", self.arm_x.to_string());
        push("arm_y", self.arm_y.to_string());
        for i in 0..4 {
            push(&format!("alpha.{i}"), self.alpha[i].to_string());
        }
        for i in 0..4 {
            push(&format!("beta.{i}"), self.beta[i].to_string());
        }
        push("f_min", self.f_min.to_string());
        push("f_max_frac", self.f_max_frac.to_string());
        push("ts", self.ts.to_string());
        push("seed", self.seed.to_string());
        push("att_wn", self.att_wn.to_string());
        push("att_zeta", self.att_zeta.to_string());
        push("obs_q_rate", self.obs_q_rate.to_string());
        push("obs_q_torque", self.obs_q_torque.to_string());
        push("obs_r_meas", self.obs_r_meas.to_string());
        push("observer", self.observer.to_string());
        push("k_phi", fmt_opt(self.k_phi));
        push("k_theta", fmt_opt(self.k_theta));
        push("tau_phi", fmt_opt(self.tau_phi));
        push("tau_theta", fmt_opt(self.tau_theta));
        push("N", self.horizon.to_string());
        push("Tc", self.tc.to_string());
        push("fext_frac", self.fext_frac.to_string());
        push("max_tilt_deg", self.max_tilt_deg.to_string());
        push("dfcmd_frac", self.dfcmd_frac.to_string());
        push("rate_max", self.rate_max.to_string());
        push("vel_max", self.vel_max.to_string());
        push("pos_max", self.pos_max.to_string());
        for (i, n) in STATE_NAMES.iter().enumerate() {
            push(&format!("q.{n}"), self.q[i].to_string());
        }
        for (i, n) in INPUT_NAMES.iter().enumerate() {
            push(&format!("r.{n}"), self.r[i].to_string());
        }
        let map = match self.euler_rate_map {
            EulerRateMap::Printed => "printed",
            EulerRateMap::Zyx => "zyx",
        };
        push("euler_rate_map", map.to_string());
        push("tube_rollouts", self.tube_rollouts.to_string());
        push("tube_horizon", self.tube_horizon.to_string());
        push("tube_seed", self.tube_seed.to_string());
        let sampling = match self.tube_sampling {
            TubeSampling::Iid => "iid",
            TubeSampling::Mixed => "mixed",
        };
        push("tube_sampling", sampling.to_string());
        push("demo_steps", self.demo_steps.to_string());
        push("n_extra", self.n_extra.to_string());
        push("aug_seed", self.aug_seed.to_string());
        push("epochs", self.epochs.to_string());
        push("lr", self.lr.to_string());
        push("lr_final", self.lr_final.map_or_else(|| "none".to_string(), |x| x.to_string()));
        push("batch", self.batch.to_string());
        push("hidden", self.hidden.to_string());
        push("train_seed", self.train_seed.to_string());
        push("normalize", self.normalize.to_string());
        push("t0", self.t0.to_string());
        push("pulse_force_frac", self.pulse_force_frac.to_string());
        push("pulse_torque_frac", self.pulse_torque_frac.to_string());
        push("pulse_duration", self.pulse_duration.to_string());
        e
    }

    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Defaults overridden by the keys present in `text`.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", lineno + 1)))?;
            cfg.set(k.trim(), v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.physical().validate()?;
        self.calibration().validate()?;
        if !(self.ts > 0.0 && self.tc > 0.0) {
            return Err(Error::Config("sampling periods must be positive".into()));
        }
        let ratio = self.tc / self.ts;
        if (ratio - ratio.round()).abs() > 1e-9 || ratio.round() < 1.0 {
            return Err(Error::Config(format!("Tc must be an integer multiple of ts (ratio {ratio})")));
        }
        if self.horizon == 0 {
            return Err(Error::Config("N must be positive".into()));
        }
        if !(self.max_tilt_deg > 0.0 && self.max_tilt_deg < 90.0) {
            return Err(Error::Config("max_tilt_deg must be in (0, 90)".into()));
        }
        if self.q.iter().chain(self.r.iter()).any(|w| !(*w > 0.0)) {
            return Err(Error::Config("cost weights must be positive".into()));
        }
        if !(self.lr >= 0.0) || self.epochs == 0 || self.batch == 0 || self.hidden == 0 {
            return Err(Error::Config("training settings out of range".into()));
        }
        if !(self.fext_frac >= 0.0 && self.dfcmd_frac > 0.0 && self.rate_max > 0.0 && self.vel_max > 0.0) {
            return Err(Error::Config("bounds must be positive".into()));
        }
        Ok(())
    }

    /// Inner steps per outer step.
    pub fn inner_steps(&self) -> usize {
        (self.tc / self.ts).round() as usize
    }

    pub fn physical(&self) -> PhysicalParams {
        let j = &self.inertia;
        PhysicalParams {
            mass: self.mass,
            inertia: Matrix3::new(j[0][0], j[0][1], j[0][2], j[1][0], j[1][1], j[1][2], j[2][0], j[2][1], j[2][2]),
            gravity: self.gravity,
            drag_lin: self.drag_lin,
            drag_rot: self.drag_rot,
            arm_x: self.arm_x,
            arm_y: self.arm_y,
        }
    }

    pub fn calibration(&self) -> ActuatorCalibration {
        ActuatorCalibration {
            alpha: Vector4::from(self.alpha),
            beta: Vector4::from(self.beta),
            f_min: self.f_min,
            f_max: self.f_max_frac * self.mass * self.gravity,
        }
    }

    pub fn attitude_gains(&self) -> AttitudeGains {
        AttitudeGains::from_bandwidth(&self.physical().inertia, self.att_wn, self.att_zeta)
    }

    pub fn observer_config(&self) -> ObserverConfig {
        ObserverConfig {
            q_rate: Matrix3::from_diagonal(&Vector3::repeat(self.obs_q_rate)),
            q_torque: Matrix3::from_diagonal(&Vector3::repeat(self.obs_q_torque)),
            r_meas: Matrix3::from_diagonal(&Vector3::repeat(self.obs_r_meas)),
            dt: self.ts,
        }
    }

    /// The attitude loop parameters if all four are given.
    pub fn attitude_loop_override(&self) -> Option<AttitudeLoopParams> {
        Some(AttitudeLoopParams {
            k_phi: self.k_phi?,
            k_theta: self.k_theta?,
            tau_phi: self.tau_phi?,
            tau_theta: self.tau_theta?,
        })
    }

    pub fn cost(&self) -> CostParams {
        CostParams::diagonal(&self.q, &self.r)
    }

    /// Disturbance bound on the force [N].
    pub fn f_ext_bar(&self) -> f64 {
        self.fext_frac * self.mass * self.gravity
    }

    pub fn state_box(&self) -> BoxSet {
        let tilt = self.max_tilt_deg.to_radians();
        let mut b = [0.0; NX];
        b[0..3].fill(self.pos_max);
        b[3..6].fill(self.vel_max);
        b[6..10].fill(tilt);
        BoxSet::symmetric(&b)
    }

    pub fn input_box(&self) -> BoxSet {
        BoxSet::symmetric(&[self.rate_max, self.rate_max, self.dfcmd_frac * self.gravity])
    }

    pub fn tube_config(&self) -> TubeConfig {
        TubeConfig {
            n_rollouts: self.tube_rollouts,
            horizon_steps: self.tube_horizon,
            seed: self.tube_seed,
            sampling: self.tube_sampling,
        }
    }

    /// Input box widths, used as the scale of action errors.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            lr_final: self.lr_final,
            epochs: self.epochs,
            batch_size: self.batch,
            seed: self.train_seed,
            normalize: self.normalize,
            ..TrainConfig::default()
        }
    }

    /// Layer sizes of the policy for this horizon.
    pub fn policy_sizes(&self) -> [usize; 4] {
        [crate::imitation::policy_input_len(self.horizon), self.hidden, self.hidden, 3]
    }

    pub fn input_widths(&self) -> DVector<f64> {
        self.input_box().width()
    }
}
