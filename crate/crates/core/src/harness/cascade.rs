//! The full cascade on the nonlinear plant: outer controller at `1/Tc`,
//! compensation, geometric attitude control with the torque observer,
//! allocation and rigid-body integration at `1/Ts`.

use std::io::{BufWriter, Write};
use std::path::Path;

use nalgebra::{DVector, Vector2, Vector3};

use crate::attitude::{control_torque, observer_step, AttitudeGains, ObserverState, TorqueObserver};
use crate::config::Config;
use crate::error::{Error, Result};
use crate::harness::metrics::{MetricAccumulator, RunMetrics};
use crate::harness::task::TrajectoryTask;
use crate::imitation::{policy_input, DemoStep, Demonstration};
use crate::linmodel::{
    build_model, rotation_to_euler, yaw_frame_transform_inverse, AttitudeLoopParams, BoxSet, DiscreteLtiModel,
    EulerZyx, NX, PHI, PHI_CMD, PX, THETA, THETA_CMD, U_PITCH_RATE, U_ROLL_RATE, U_THRUST, VX,
};
use crate::mlp::MlpPolicy;
use crate::rtmpc::{compensate, setpoints, EulerRateMap, RtmpcController, SafePlan, TrackingQp, TubeController};
use crate::sim::{
    allocate, force_to_voltage, mixer_forward, step_dynamics, voltage_to_force, ActuatorCalibration,
    DisturbanceProfile, PhysicalParams, RigidBodyState, Wrench,
};

/// Inner loop: compensation, setpoints, attitude law, observer, mixer.
#[derive(Clone, Debug)]
pub struct InnerLoop {
    pub params: PhysicalParams,
    pub cal: ActuatorCalibration,
    pub gains: AttitudeGains,
    pub observer: Option<TorqueObserver>,
    pub map: EulerRateMap,
    pub ts: f64,
    pub estimate: ObserverState,
    /// Integrated roll/pitch commands of the linear model (yaw-aligned frame).
    pub cmd_inertial: Vector2<f64>,
    prev: Option<(Vector3<f64>, Vector3<f64>)>,
}

/// What one inner step applied.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct InnerOutput {
    pub wrench: Wrench,
    /// Commanded collective thrust [N].
    pub thrust_cmd: f64,
    pub saturated: bool,
}

impl InnerLoop {
    pub fn new(
        params: PhysicalParams,
        cal: ActuatorCalibration,
        gains: AttitudeGains,
        observer: Option<TorqueObserver>,
        map: EulerRateMap,
        ts: f64,
    ) -> Self {
        Self {
            params,
            cal,
            gains,
            observer,
            map,
            ts,
            estimate: ObserverState::default(),
            cmd_inertial: Vector2::zeros(),
            prev: None,
        }
    }

    pub fn from_config(cfg: &Config, observer: bool) -> Result<Self> {
        let params = cfg.physical();
        let obs = if observer { Some(TorqueObserver::design(&params.inertia, &cfg.observer_config())?) } else { None };
        let gains = cfg.attitude_gains();
        gains.validate()?;
        Ok(Self::new(params, cfg.calibration(), gains, obs, cfg.euler_rate_map, cfg.ts))
    }

    /// One control period with the outer input `u = [phi_dot, theta_dot, df]`
    /// held.
    pub fn step(&mut self, state: &RigidBodyState, u: &DVector<f64>) -> Result<InnerOutput> {
        let e = rotation_to_euler(&state.rotation)?;
        let w = state.body_rate;
        if let (Some(obs), Some((tau_prev, w_prev))) = (&self.observer, self.prev) {
            let u_o = tau_prev - w_prev.cross(&(obs.inertia * w_prev));
            self.estimate = observer_step(&self.estimate, &u_o, &w, &obs.gain, &obs.inertia_inv, obs.dt);
        }
        let rates = Vector2::new(u[U_ROLL_RATE], u[U_PITCH_RATE]);
        let cmd = compensate(u[U_THRUST], &e, &self.cmd_inertial, self.params.gravity);
        let sp = setpoints(&cmd, e.psi, &rates, self.map);
        let mut tau = control_torque(&state.rotation, &w, &sp, &self.estimate.torque, &self.gains, &self.params.inertia);
        tau.z = 0.0;

        let thrust_cmd = self.params.mass * cmd.f_cmd;
        let alloc = allocate(&Vector3::new(thrust_cmd, tau.x, tau.y), &self.params, &self.cal);
        let volts = force_to_voltage(&alloc.forces, &self.cal);
        let realised = mixer_forward(&voltage_to_force(&volts, &self.cal), &self.params);
        let wrench = Wrench::new(realised.x, Vector3::new(realised.y, realised.z, 0.0));

        self.prev = Some((wrench.torque, w));
        self.cmd_inertial += rates * self.ts;
        Ok(InnerOutput { wrench, thrust_cmd, saturated: alloc.saturated })
    }
}

/// Linear-model state measured from the plant.
pub fn measure_state(state: &RigidBodyState, cmd_inertial: &Vector2<f64>) -> Result<DVector<f64>> {
    let e = rotation_to_euler(&state.rotation)?;
    let att = yaw_frame_transform_inverse(&Vector2::new(e.phi, e.theta), e.psi);
    let mut x = DVector::zeros(NX);
    x.rows_mut(PX, 3).copy_from(&state.position);
    x.rows_mut(VX, 3).copy_from(&state.velocity);
    x[PHI] = att.x;
    x[THETA] = att.y;
    x[PHI_CMD] = cmd_inertial.x;
    x[THETA_CMD] = cmd_inertial.y;
    Ok(x)
}

/// First-order fit of one attitude axis.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AxisFit {
    pub k: f64,
    pub tau: f64,
    /// RMS of the fit residual [rad].
    pub rms: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttitudeFit {
    pub roll: AxisFit,
    pub pitch: AxisFit,
}

impl AttitudeFit {
    pub fn params(&self) -> AttitudeLoopParams {
        AttitudeLoopParams { k_phi: self.roll.k, k_theta: self.pitch.k, tau_phi: self.roll.tau, tau_theta: self.pitch.tau }
    }
}

const FIT_STEP: f64 = 0.02;
const FIT_DURATION: f64 = 0.5;

/// Least-squares `y = k a (1 - exp(-t / tau))`: `k` in closed form for each
/// `tau`, `tau` by golden-section search on `log tau` over `[1e-3, 1]`.
pub fn fit_first_order(t: &[f64], y: &[f64], amplitude: f64) -> AxisFit {
    let k_for = |tau: f64| -> (f64, f64) {
        let (mut sy, mut ss) = (0.0, 0.0);
        for (ti, yi) in t.iter().zip(y) {
            let s = amplitude * (1.0 - (-ti / tau).exp());
            sy += s * yi;
            ss += s * s;
        }
        let k = if ss > 0.0 { sy / ss } else { 0.0 };
        let sse: f64 = t
            .iter()
            .zip(y)
            .map(|(ti, yi)| {
                let r = yi - k * amplitude * (1.0 - (-ti / tau).exp());
                r * r
            })
            .sum();
        (k, sse)
    };
    let phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (1e-3f64.ln(), 0.0f64);
    let mut c = b - phi * (b - a);
    let mut d = a + phi * (b - a);
    let (mut fc, mut fd) = (k_for(c.exp()).1, k_for(d.exp()).1);
    for _ in 0..100 {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - phi * (b - a);
            fc = k_for(c.exp()).1;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + phi * (b - a);
            fd = k_for(d.exp()).1;
        }
        if b - a < 1e-10 {
            break;
        }
    }
    let tau = (0.5 * (a + b)).exp();
    let (k, sse) = k_for(tau);
    AxisFit { k, tau, rms: (sse / t.len().max(1) as f64).sqrt() }
}

/// Step response of the closed inner loop to a held roll or pitch command,
/// sampled every inner step. Returns `(t, angle)`.
pub fn attitude_step_response(cfg: &Config, pitch: bool, amplitude: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut inner = InnerLoop::from_config(cfg, cfg.observer)?;
    inner.cmd_inertial = if pitch { Vector2::new(0.0, amplitude) } else { Vector2::new(amplitude, 0.0) };
    let u = DVector::zeros(3);
    let mut state = RigidBodyState::at_rest(Vector3::zeros());
    let steps = (FIT_DURATION / cfg.ts).round() as usize;
    let (mut ts, mut ys) = (Vec::with_capacity(steps), Vec::with_capacity(steps));
    for i in 0..steps {
        let out = inner.step(&state, &u)?;
        state = step_dynamics(&state, &out.wrench, &Vector3::zeros(), &Vector3::zeros(), &inner.params, cfg.ts)?;
        let x = measure_state(&state, &inner.cmd_inertial)?;
        ts.push((i + 1) as f64 * cfg.ts);
        ys.push(if pitch { x[THETA] } else { x[PHI] });
    }
    Ok((ts, ys))
}

/// Fits the first-order attitude model to simulated step responses.
pub fn fit_attitude_loop(cfg: &Config) -> Result<AttitudeFit> {
    let mut fits = [None, None];
    for (i, pitch) in [false, true].into_iter().enumerate() {
        let (t, y) = attitude_step_response(cfg, pitch, FIT_STEP)?;
        fits[i] = Some(fit_first_order(&t, &y, FIT_STEP));
    }
    let fit = AttitudeFit { roll: fits[0].unwrap(), pitch: fits[1].unwrap() };
    fit.params().validate()?;
    Ok(fit)
}

/// Every designed component of the cascade for one configuration.
#[derive(Clone, Debug)]
pub struct ControllerStack {
    pub cfg: Config,
    pub attitude_loop: AttitudeLoopParams,
    pub fit: Option<AttitudeFit>,
    pub model: DiscreteLtiModel,
    pub tube: TubeController,
    pub qp: TrackingQp,
}

impl ControllerStack {
    pub fn build(cfg: &Config) -> Result<Self> {
        cfg.validate()?;
        let (attitude_loop, fit) = match cfg.attitude_loop_override() {
            Some(p) => (p, None),
            None => {
                let f = fit_attitude_loop(cfg)?;
                (f.params(), Some(f))
            }
        };
        let model = build_model(&cfg.physical(), &attitude_loop, cfg.tc, cfg.f_ext_bar())?;
        let tube = TubeController::design(&model, &cfg.cost(), &cfg.state_box(), &cfg.input_box(), &cfg.tube_config())?;
        let qp = TrackingQp::new(&model, &cfg.cost(), &tube, cfg.horizon)?;
        log::info!(
            "attitude loop k=({:.4},{:.4}) tau=({:.4},{:.4}); rho(A+BK)={:.4}",
            attitude_loop.k_phi,
            attitude_loop.k_theta,
            attitude_loop.tau_phi,
            attitude_loop.tau_theta,
            tube.spectral_radius
        );
        Ok(Self { cfg: cfg.clone(), attitude_loop, fit, model, tube, qp })
    }

    pub fn rtmpc(&self) -> RtmpcController {
        RtmpcController::new(self.qp.clone())
    }

    pub fn input_box(&self) -> &BoxSet {
        &self.tube.u
    }
}

/// Input chosen by an outer controller.
#[derive(Clone, Debug)]
pub struct Decision {
    pub u: DVector<f64>,
    pub plan: Option<SafePlan>,
}

pub trait OuterController {
    fn decide(&mut self, x: &DVector<f64>, window: &[DVector<f64>]) -> Result<Decision>;
    fn infeasible_steps(&self) -> usize {
        0
    }
    fn clamp_count(&self) -> usize;
}

impl OuterController for RtmpcController {
    fn decide(&mut self, x: &DVector<f64>, window: &[DVector<f64>]) -> Result<Decision> {
        let out = self.control(x, window)?;
        Ok(Decision { u: out.u, plan: Some(out.plan) })
    }
    fn infeasible_steps(&self) -> usize {
        self.infeasible_steps
    }
    fn clamp_count(&self) -> usize {
        self.clamp_count
    }
}

/// The learned policy, with its output clamped to the input box.
#[derive(Clone, Debug)]
pub struct PolicyController {
    pub net: MlpPolicy,
    pub u_box: BoxSet,
    pub clamp_count: usize,
}

impl PolicyController {
    pub fn new(net: MlpPolicy, u_box: BoxSet) -> Self {
        Self { net, u_box, clamp_count: 0 }
    }
}

impl OuterController for PolicyController {
    fn decide(&mut self, x: &DVector<f64>, window: &[DVector<f64>]) -> Result<Decision> {
        let raw = self.net.forward(&policy_input(x, window)?)?;
        let u = raw.zip_zip_map(&self.u_box.lo, &self.u_box.hi, |v, l, h| v.clamp(l, h));
        if u != raw {
            self.clamp_count += 1;
        }
        Ok(Decision { u, plan: None })
    }
    fn clamp_count(&self) -> usize {
        self.clamp_count
    }
}

/// One inner-rate row of the trajectory log.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub t: f64,
    pub state: RigidBodyState,
    pub thrust_cmd: f64,
    pub torque: Vector2<f64>,
    pub f_ext: Vector3<f64>,
    pub tau_ext: Vector3<f64>,
    pub saturated: bool,
    pub tau_hat: Vector3<f64>,
    pub w_hat: Vector3<f64>,
    pub p_des: Vector3<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrajectoryLog {
    pub disturbance_fingerprint: u64,
    pub rows: Vec<LogRow>,
}

pub const LOG_HEADER: &str = "t,px,py,pz,vx,vy,vz,r00,r01,r02,r10,r11,r12,r20,r21,r22,wx,wy,wz,fcmd,taux,tauy,\
fext_x,fext_y,fext_z,tauext_x,tauext_y,tauext_z,sat_flag,tauhat_x,tauhat_y,tauhat_z,what_x,what_y,what_z,\
pdes_x,pdes_y,pdes_z";

impl TrajectoryLog {
    /// CSV with a `#disturbance_fnv1a=` line before the header.
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        writeln!(w, "#disturbance_fnv1a={:016x}", self.disturbance_fingerprint)?;
        writeln!(w, "{LOG_HEADER}")?;
        for r in &self.rows {
            let s = &r.state;
            let mut v: Vec<f64> = vec![r.t];
            v.extend(s.position.iter());
            v.extend(s.velocity.iter());
            for i in 0..3 {
                v.extend(s.rotation.row(i).iter());
            }
            v.extend(s.body_rate.iter());
            v.push(r.thrust_cmd);
            v.extend(r.torque.iter());
            v.extend(r.f_ext.iter());
            v.extend(r.tau_ext.iter());
            v.push(if r.saturated { 1.0 } else { 0.0 });
            v.extend(r.tau_hat.iter());
            v.extend(r.w_hat.iter());
            v.extend(r.p_des.iter());
            writeln!(w, "{}", v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(","))?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct RunOptions {
    pub observer: bool,
    pub disturbance: DisturbanceProfile,
    /// Outer steps to fly; defaults to the task duration.
    pub outer_steps: Option<usize>,
    pub log: bool,
    pub record: bool,
}

impl RunOptions {
    pub fn new(observer: bool, disturbance: DisturbanceProfile) -> Self {
        Self { observer, disturbance, outer_steps: None, log: false, record: false }
    }
}

#[derive(Clone, Debug)]
pub struct RunResult {
    pub metrics: RunMetrics,
    pub log: Option<TrajectoryLog>,
    pub demo: Option<Demonstration>,
    pub final_state: RigidBodyState,
}

/// Flies `task` from rest at the origin. The outer input is held for
/// `Tc / Ts` inner steps; metrics use every inner sample with `t >= t0`.
pub fn run_closed_loop(
    stack: &ControllerStack,
    ctrl: &mut dyn OuterController,
    task: &TrajectoryTask,
    opts: &RunOptions,
) -> Result<RunResult> {
    let cfg = &stack.cfg;
    let mut inner = InnerLoop::from_config(cfg, opts.observer)?;
    let n_inner = cfg.inner_steps();
    let steps = opts.outer_steps.unwrap_or_else(|| task.outer_steps(cfg.tc));
    let mut state = RigidBodyState::at_rest(Vector3::zeros());
    let mut acc = MetricAccumulator::new(cfg.t0);
    let mut log = opts.log.then(|| TrajectoryLog {
        disturbance_fingerprint: opts.disturbance.fingerprint(),
        rows: Vec::with_capacity(steps * n_inner),
    });
    let mut demo = opts.record.then(Demonstration::default);
    let mut saturations = 0;

    for k in 0..steps {
        let t_k = k as f64 * cfg.tc;
        let x = measure_state(&state, &inner.cmd_inertial)?;
        let window = task.reference_window(k, cfg.tc, cfg.horizon);
        let d = ctrl.decide(&x, &window)?;
        if let (Some(demo), Some(plan)) = (demo.as_mut(), d.plan.as_ref()) {
            demo.steps.push(DemoStep {
                t: t_k,
                x: x.clone(),
                u: d.u.clone(),
                u_bar: plan.u_bar[0].clone(),
                x_bar: plan.x_bar[0].clone(),
                window,
            });
        }
        for j in 0..n_inner {
            let t = t_k + j as f64 * cfg.ts;
            let out = inner.step(&state, &d.u)?;
            saturations += out.saturated as usize;
            let (f_ext, tau_ext) = opts.disturbance.at(t);
            state = step_dynamics(&state, &out.wrench, &f_ext, &tau_ext, &inner.params, cfg.ts)?;
            let t_next = t_k + (j + 1) as f64 * cfg.ts;
            let (p_des, _) = task.desired(t_next);
            acc.push(t_next, &(state.position - p_des));
            if let Some(log) = log.as_mut() {
                log.rows.push(LogRow {
                    t: t_next,
                    state: state.clone(),
                    thrust_cmd: out.thrust_cmd,
                    torque: Vector2::new(out.wrench.torque.x, out.wrench.torque.y),
                    f_ext,
                    tau_ext,
                    saturated: out.saturated,
                    tau_hat: inner.estimate.torque,
                    w_hat: inner.estimate.rate,
                    p_des,
                });
            }
        }
    }
    let mut metrics = acc.finish();
    metrics.infeasible_steps = ctrl.infeasible_steps();
    metrics.saturation_count = saturations;
    metrics.clamp_count = ctrl.clamp_count();
    Ok(RunResult { metrics, log, demo, final_state: state })
}

/// `T + 1` RTMPC tuples on the undisturbed plant with the observer off.
/// A QP failure is returned as an error instead of being papered over by the
/// fallback plan.
pub fn collect_demonstration(stack: &ControllerStack, task: &TrajectoryTask, t_steps: usize) -> Result<Demonstration> {
    let mut ctrl = stack.rtmpc();
    let opts = RunOptions {
        outer_steps: Some(t_steps + 1),
        record: true,
        ..RunOptions::new(false, DisturbanceProfile::none())
    };
    let out = run_closed_loop(stack, &mut ctrl, task, &opts)?;
    if ctrl.infeasible_steps > 0 {
        return Err(Error::Infeasible(format!(
            "{} of {} tracking QPs failed while collecting the demonstration",
            ctrl.infeasible_steps,
            t_steps + 1
        )));
    }
    Ok(out.demo.unwrap_or_default())
}

/// Euler angles of a rotation; convenience for logs and tests.
pub fn euler_of(state: &RigidBodyState) -> Result<EulerZyx> {
    rotation_to_euler(&state.rotation)
}
