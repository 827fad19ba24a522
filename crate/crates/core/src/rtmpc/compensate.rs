//! Conversion of linear-model commands into thrust and attitude setpoints.

use nalgebra::{Matrix3, Vector2, Vector3};

use crate::attitude::AttitudeSetpoint;
use crate::error::{Error, Result};
use crate::linmodel::{euler_to_rotation, yaw_frame_transform, EulerZyx};

/// Which Euler-rate-to-angular-velocity matrix builds `w_d`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum EulerRateMap {
    /// `[[0, -s psi, c psi s theta], [0, c psi, s psi c theta], [1, 0, -s theta]]`.
    #[default]
    Printed,
    /// Body rates of intrinsic z-y-x angles:
    /// `[[-s theta, 0, 1], [c theta s phi, c phi, 0], [c theta c phi, -s phi, 0]]`.
    Zyx,
}

impl std::str::FromStr for EulerRateMap {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "printed" => Ok(Self::Printed),
            "zyx" => Ok(Self::Zyx),
            other => Err(Error::Config(format!("unknown euler rate map {other:?}"))),
        }
    }
}

/// Matrix mapping `[psi_dot, theta_dot, phi_dot]` to angular velocity.
pub fn euler_rate_matrix(map: EulerRateMap, e: &EulerZyx) -> Matrix3<f64> {
    let (sps, cps) = e.psi.sin_cos();
    let (sth, cth) = e.theta.sin_cos();
    let (sph, cph) = e.phi.sin_cos();
    match map {
        EulerRateMap::Printed => Matrix3::new(0.0, -sps, cps * sth, 0.0, cps, sps * cth, 1.0, 0.0, -sth),
        EulerRateMap::Zyx => Matrix3::new(-sth, 0.0, 1.0, cth * sph, cph, 0.0, cth * cph, -sph, 0.0),
    }
}

/// Thrust (mass-normalised) and body roll/pitch commands.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CompensatedCommand {
    /// [m/s^2]
    pub f_cmd: f64,
    pub phi_cmd: f64,
    pub theta_cmd: f64,
    /// `g / f_cmd`, reused to scale the rate commands.
    pub scale: f64,
}

/// `f = (df + g) / (cos phi cos theta)` and `[phi; theta]_cmd = (g / f)
/// R_BI(psi) [dphi; dtheta]_I`.
pub fn compensate(df_cmd: f64, current: &EulerZyx, dcmd_inertial: &Vector2<f64>, gravity: f64) -> CompensatedCommand {
    let f_cmd = (df_cmd + gravity) / (current.phi.cos() * current.theta.cos());
    let scale = gravity / f_cmd;
    let body = yaw_frame_transform(dcmd_inertial, current.psi) * scale;
    CompensatedCommand { f_cmd, phi_cmd: body.x, theta_cmd: body.y, scale }
}

/// Attitude setpoint at the current yaw. `rates_inertial` is
/// `[roll rate, pitch rate]` in the yaw-aligned frame of the linear model; it
/// is rotated to the body frame and scaled like the angle commands before
/// entering the Euler-rate map with zero yaw rate.
pub fn setpoints(
    cmd: &CompensatedCommand,
    psi: f64,
    rates_inertial: &Vector2<f64>,
    map: EulerRateMap,
) -> AttitudeSetpoint {
    let desired = EulerZyx::new(psi, cmd.theta_cmd, cmd.phi_cmd);
    let rates = yaw_frame_transform(rates_inertial, psi) * cmd.scale;
    let q = Vector3::new(0.0, rates.y, rates.x);
    AttitudeSetpoint { rotation: euler_to_rotation(&desired), body_rate: euler_rate_matrix(map, &desired) * q }
}
