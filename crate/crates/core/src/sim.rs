//! Nonlinear plant: allocation (mixer), actuator calibration and RK4
//! integration of the Newton-Euler rigid-body equations.

use std::fmt::Write as _;

use nalgebra::{Matrix3, Matrix3x4, Vector3, Vector4};

use crate::error::{Error, Result};
use crate::linalg::fnv1a;

/// Physical constants of the vehicle.
///
/// Only the mass is a published value. Inertia, lever arms and drag
/// coefficients are insect-scale placeholders and should be overridden
/// from a parameter file when identified values are available.
#[derive(Clone, Debug, PartialEq)]
pub struct PhysicalParams {
    /// Mass [kg].
    pub mass: f64,
    /// Inertia tensor [kg m^2]; must be diagonal.
    pub inertia: Matrix3<f64>,
    /// Gravity [m/s^2].
    pub gravity: f64,
    /// Translational drag [N s/m].
    pub drag_lin: f64,
    /// Rotational drag [N m s/rad].
    pub drag_rot: f64,
    /// Lever arm along body x [m].
    pub arm_x: f64,
    /// Lever arm along body y [m].
    pub arm_y: f64,
}

impl Default for PhysicalParams {
    fn default() -> Self {
        Self {
            mass: 0.7e-3,
            inertia: Matrix3::from_diagonal(&Vector3::new(1.0e-7, 1.0e-7, 5.0e-8)),
            gravity: 9.81,
            drag_lin: 2.0e-4,
            drag_rot: 5.0e-9,
            arm_x: 0.01,
            arm_y: 0.01,
        }
    }
}

impl PhysicalParams {
    pub fn validate(&self) -> Result<()> {
        let j = &self.inertia;
        let off_diag = (0..3)
            .flat_map(|r| (0..3).map(move |c| (r, c)))
            .filter(|(r, c)| r != c)
            .any(|(r, c)| j[(r, c)] != 0.0);
        if !(self.mass > 0.0) {
            return Err(Error::Config(format!("mass must be positive, got {}", self.mass)));
        }
        if off_diag || (0..3).any(|i| !(j[(i, i)] > 0.0)) {
            return Err(Error::Config("inertia must be diagonal with positive entries".into()));
        }
        if !(self.gravity > 0.0) {
            return Err(Error::Config("gravity must be positive".into()));
        }
        if self.drag_lin < 0.0 || self.drag_rot < 0.0 {
            return Err(Error::Config("drag coefficients must be non-negative".into()));
        }
        if !(self.arm_x > 0.0 && self.arm_y > 0.0) {
            return Err(Error::Config("lever arms must be positive".into()));
        }
        Ok(())
    }

    pub fn weight(&self) -> f64 {
        self.mass * self.gravity
    }

    /// Largest roll torque obtainable at hover thrust with the given
    /// per-actuator limits.
    pub fn max_roll_torque(&self, cal: &ActuatorCalibration) -> f64 {
        let hover = self.weight() / 4.0;
        let swing = (cal.f_max - hover).min(hover - cal.f_min).max(0.0);
        4.0 * self.arm_y * swing
    }
}

/// Linear voltage-to-lift calibration, `f_i = alpha_i v_i + beta_i`, and
/// per-actuator lift limits.
#[derive(Clone, Debug, PartialEq)]
pub struct ActuatorCalibration {
    pub alpha: Vector4<f64>,
    pub beta: Vector4<f64>,
    pub f_min: f64,
    pub f_max: f64,
}

impl Default for ActuatorCalibration {
    fn default() -> Self {
        let weight = PhysicalParams::default().weight();
        Self {
            alpha: Vector4::repeat(2.5e-6),
            beta: Vector4::repeat(-5.0e-4),
            f_min: 0.0,
            f_max: 0.5 * weight,
        }
    }
}

impl ActuatorCalibration {
    pub fn validate(&self) -> Result<()> {
        if self.alpha.iter().any(|a| !(*a > 0.0)) {
            return Err(Error::Config("actuator gains must be positive".into()));
        }
        if self.f_min > self.f_max {
            return Err(Error::Config("f_min must not exceed f_max".into()));
        }
        Ok(())
    }
}

pub fn voltage_to_force(volts: &Vector4<f64>, cal: &ActuatorCalibration) -> Vector4<f64> {
    cal.alpha.component_mul(volts) + cal.beta
}

pub fn force_to_voltage(forces: &Vector4<f64>, cal: &ActuatorCalibration) -> Vector4<f64> {
    (forces - cal.beta).component_div(&cal.alpha)
}

/// Full 6-DOF state. Rotation maps body to world.
#[derive(Clone, Debug, PartialEq)]
pub struct RigidBodyState {
    pub position: Vector3<f64>,
    pub velocity: Vector3<f64>,
    pub rotation: Matrix3<f64>,
    pub body_rate: Vector3<f64>,
}

impl Default for RigidBodyState {
    fn default() -> Self {
        Self::at_rest(Vector3::zeros())
    }
}

impl RigidBodyState {
    pub fn at_rest(position: Vector3<f64>) -> Self {
        Self {
            position,
            velocity: Vector3::zeros(),
            rotation: Matrix3::identity(),
            body_rate: Vector3::zeros(),
        }
    }

    pub fn orthogonality_error(&self) -> f64 {
        (self.rotation.transpose() * self.rotation - Matrix3::identity()).norm()
    }

    pub fn is_finite(&self) -> bool {
        self.position.iter().all(|v| v.is_finite())
            && self.velocity.iter().all(|v| v.is_finite())
            && self.rotation.iter().all(|v| v.is_finite())
            && self.body_rate.iter().all(|v| v.is_finite())
    }
}

/// Collective thrust and body torque. The z torque is carried for logging
/// but the actuators cannot produce it.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Wrench {
    pub thrust: f64,
    pub torque: Vector3<f64>,
}

impl Wrench {
    pub fn new(thrust: f64, torque: Vector3<f64>) -> Self {
        Self { thrust, torque }
    }

    /// The part the mixer can realise: `(f, tau_x, tau_y)`.
    pub fn actuated(&self) -> Vector3<f64> {
        Vector3::new(self.thrust, self.torque.x, self.torque.y)
    }
}

pub fn allocation_matrix(params: &PhysicalParams) -> Matrix3x4<f64> {
    let (lx, ly) = (params.arm_x, params.arm_y);
    Matrix3x4::new(
        1.0, 1.0, 1.0, 1.0, //
        -ly, ly, ly, -ly, //
        -lx, -lx, lx, lx,
    )
}

/// `(f_cmd, tau_x, tau_y) = A f`.
pub fn mixer_forward(forces: &Vector4<f64>, params: &PhysicalParams) -> Vector3<f64> {
    allocation_matrix(params) * forces
}

/// Minimum-norm lift forces realising `(f_cmd, tau_x, tau_y)`, via the
/// Moore-Penrose inverse `A^T (A A^T)^-1`. No limits are applied.
pub fn mixer_inverse(wrench: &Vector3<f64>, params: &PhysicalParams) -> Vector4<f64> {
    let a = allocation_matrix(params);
    let gram = a * a.transpose();
    let gram_inv = gram
        .try_inverse()
        .expect("allocation matrix has full row rank for positive lever arms");
    a.transpose() * (gram_inv * wrench)
}

/// Forces after applying the per-actuator limits.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Allocation {
    pub forces: Vector4<f64>,
    pub saturated: bool,
}

/// Pseudo-inverse allocation followed by clamping to `[f_min, f_max]`.
/// Saturation is reported through the flag rather than as an error.
pub fn allocate(wrench: &Vector3<f64>, params: &PhysicalParams, cal: &ActuatorCalibration) -> Allocation {
    let raw = mixer_inverse(wrench, params);
    let forces = raw.map(|f| f.clamp(cal.f_min, cal.f_max));
    Allocation { forces, saturated: forces != raw }
}

pub fn hat(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

pub fn vee(m: &Matrix3<f64>) -> Result<Vector3<f64>> {
    let asym = (m + m.transpose()).norm();
    if asym > 1e-9 {
        return Err(Error::NotSkew(asym));
    }
    Ok(Vector3::new(m[(2, 1)], m[(0, 2)], m[(1, 0)]))
}

#[derive(Clone, Copy)]
struct Derivative {
    p: Vector3<f64>,
    v: Vector3<f64>,
    r: Matrix3<f64>,
    w: Vector3<f64>,
}

struct Inputs<'a> {
    wrench: &'a Wrench,
    f_ext: &'a Vector3<f64>,
    tau_ext: &'a Vector3<f64>,
    params: &'a PhysicalParams,
    inertia_inv: Matrix3<f64>,
}

fn derivative(
    v: &Vector3<f64>,
    r: &Matrix3<f64>,
    w: &Vector3<f64>,
    inp: &Inputs<'_>,
) -> Derivative {
    let p = inp.params;
    let z_w = Vector3::z();
    let force = r * z_w * inp.wrench.thrust - z_w * p.weight() - v * p.drag_lin + inp.f_ext;
    let jw = p.inertia * w;
    let torque = -w.cross(&jw) + inp.wrench.torque - w * p.drag_rot + inp.tau_ext;
    Derivative {
        p: *v,
        v: force / p.mass,
        r: r * hat(w),
        w: inp.inertia_inv * torque,
    }
}

/// Projects a near-orthogonal matrix onto SO(3) with Newton polar
/// iterations `R <- (R + R^-T) / 2`.
pub fn reorthonormalize(r: &Matrix3<f64>) -> Matrix3<f64> {
    let mut out = *r;
    for _ in 0..3 {
        let inv_t = match out.try_inverse() {
            Some(inv) => inv.transpose(),
            None => return out,
        };
        let next = (out + inv_t) * 0.5;
        let delta = (next - out).norm();
        out = next;
        if delta < 1e-15 {
            break;
        }
    }
    out
}

/// One RK4 step of the Newton-Euler equations with linear drag, followed by
/// re-orthonormalization of the rotation.
pub fn step_dynamics(
    state: &RigidBodyState,
    wrench: &Wrench,
    f_ext: &Vector3<f64>,
    tau_ext: &Vector3<f64>,
    params: &PhysicalParams,
    ts: f64,
) -> Result<RigidBodyState> {
    let inp = Inputs {
        wrench,
        f_ext,
        tau_ext,
        params,
        inertia_inv: params
            .inertia
            .try_inverse()
            .ok_or_else(|| Error::Config("singular inertia".into()))?,
    };
    let (v0, r0, w0) = (state.velocity, state.rotation, state.body_rate);

    let k1 = derivative(&v0, &r0, &w0, &inp);
    let h = 0.5 * ts;
    let k2 = derivative(&(v0 + k1.v * h), &(r0 + k1.r * h), &(w0 + k1.w * h), &inp);
    let k3 = derivative(&(v0 + k2.v * h), &(r0 + k2.r * h), &(w0 + k2.w * h), &inp);
    let k4 = derivative(&(v0 + k3.v * ts), &(r0 + k3.r * ts), &(w0 + k3.w * ts), &inp);

    let s = ts / 6.0;
    let next = RigidBodyState {
        position: state.position + (k1.p + k2.p * 2.0 + k3.p * 2.0 + k4.p) * s,
        velocity: v0 + (k1.v + k2.v * 2.0 + k3.v * 2.0 + k4.v) * s,
        rotation: reorthonormalize(&(r0 + (k1.r + k2.r * 2.0 + k3.r * 2.0 + k4.r) * s)),
        body_rate: w0 + (k1.w + k2.w * 2.0 + k3.w * 2.0 + k4.w) * s,
    };
    if !next.is_finite() {
        return Err(Error::NonFiniteState(format!("{next:?}")));
    }
    Ok(next)
}

/// A rectangular force/torque pulse active on `[start, start + duration)`.
#[derive(Clone, Debug, PartialEq)]
pub struct DisturbancePulse {
    pub start: f64,
    pub duration: f64,
    pub force: Vector3<f64>,
    pub torque: Vector3<f64>,
}

/// Time-indexed external force (world frame) and torque (body frame).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DisturbanceProfile {
    pub constant_force: Vector3<f64>,
    pub constant_torque: Vector3<f64>,
    pub pulses: Vec<DisturbancePulse>,
}

impl DisturbanceProfile {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn at(&self, t: f64) -> (Vector3<f64>, Vector3<f64>) {
        let mut f = self.constant_force;
        let mut tau = self.constant_torque;
        for p in &self.pulses {
            if t >= p.start && t < p.start + p.duration {
                f += p.force;
                tau += p.torque;
            }
        }
        (f, tau)
    }

    /// Text form: one record per line,
    /// `constant fx fy fz tx ty tz` or `pulse start duration fx fy fz tx ty tz`.
    pub fn to_text(&self) -> String {
        let mut s = String::from("#disturbance=1\n");
        let c = (&self.constant_force, &self.constant_torque);
        writeln!(s, "constant {} {} {} {} {} {}", c.0.x, c.0.y, c.0.z, c.1.x, c.1.y, c.1.z).unwrap();
        for p in &self.pulses {
            writeln!(
                s,
                "pulse {} {} {} {} {} {} {} {}",
                p.start, p.duration, p.force.x, p.force.y, p.force.z, p.torque.x, p.torque.y, p.torque.z
            )
            .unwrap();
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some("#disturbance=1") {
            return Err(Error::FormatVersionMismatch("expected '#disturbance=1' header".into()));
        }
        let mut out = Self::default();
        for (no, line) in lines.enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let mut it = line.split_whitespace();
            let kind = it.next().unwrap_or_default();
            let nums: Vec<f64> = it
                .map(|t| t.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::FormatVersionMismatch(format!("line {}: {e}", no + 2)))?;
            match (kind, nums.len()) {
                ("constant", 6) => {
                    out.constant_force = Vector3::new(nums[0], nums[1], nums[2]);
                    out.constant_torque = Vector3::new(nums[3], nums[4], nums[5]);
                }
                ("pulse", 8) => out.pulses.push(DisturbancePulse {
                    start: nums[0],
                    duration: nums[1],
                    force: Vector3::new(nums[2], nums[3], nums[4]),
                    torque: Vector3::new(nums[5], nums[6], nums[7]),
                }),
                _ => {
                    return Err(Error::FormatVersionMismatch(format!(
                        "line {}: unrecognised record '{line}'",
                        no + 2
                    )))
                }
            }
        }
        Ok(out)
    }

    pub fn fingerprint(&self) -> u64 {
        fnv1a(self.to_text().as_bytes())
    }
}

/// Plant integration settings for one rollout.
#[derive(Clone, Debug)]
pub struct SimConfig {
    /// Integration step [s]; equal to the inner control period.
    pub ts: f64,
    pub seed: u64,
    pub disturbance: DisturbanceProfile,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self { ts: 5e-4, seed: 0, disturbance: DisturbanceProfile::none() }
    }
}
