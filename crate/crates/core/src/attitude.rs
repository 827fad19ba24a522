//! Inner loop: geometric attitude control on SO(3) with adaptive torque
//! compensation, and the steady-state Kalman filter that estimates the
//! external torque.

use nalgebra::{DMatrix, Matrix3, SMatrix, Vector3};

use crate::error::{Error, Result};
use crate::sim::hat;

/// Diagonal gains of the attitude law.
#[derive(Clone, Debug, PartialEq)]
pub struct AttitudeGains {
    /// Diagonal of `K_R` [N m/rad].
    pub k_r: Vector3<f64>,
    /// Diagonal of `K_w` [N m s/rad].
    pub k_w: Vector3<f64>,
}

impl AttitudeGains {
    /// Gains that place each axis at natural frequency `wn` and damping
    /// `zeta` for the linearised rigid body `J e'' = tau`.
    pub fn from_bandwidth(inertia: &Matrix3<f64>, wn: f64, zeta: f64) -> Self {
        let j = inertia.diagonal();
        Self { k_r: j * wn * wn, k_w: j * (2.0 * zeta * wn) }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k_r.iter().chain(self.k_w.iter()).any(|g| !(*g > 0.0)) {
            return Err(Error::Config("attitude gains must be strictly positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttitudeSetpoint {
    pub rotation: Matrix3<f64>,
    pub body_rate: Vector3<f64>,
}

impl AttitudeSetpoint {
    pub fn level() -> Self {
        Self { rotation: Matrix3::identity(), body_rate: Vector3::zeros() }
    }
}

/// `e_R = 1/2 vee(R_d^T R - R^T R_d)`.
pub fn attitude_error(r: &Matrix3<f64>, r_d: &Matrix3<f64>) -> Vector3<f64> {
    let m = r_d.transpose() * r - r.transpose() * r_d;
    Vector3::new(m[(2, 1)], m[(0, 2)], m[(1, 0)]) * 0.5
}

/// `e_w = w - R^T R_d w_d`.
pub fn angular_velocity_error(
    w: &Vector3<f64>,
    r: &Matrix3<f64>,
    r_d: &Matrix3<f64>,
    w_d: &Vector3<f64>,
) -> Vector3<f64> {
    w - r.transpose() * r_d * w_d
}

/// Geometric attitude law with the estimated external torque subtracted.
/// The desired angular acceleration is taken as zero. The caller drops the
/// z component before allocation.
pub fn control_torque(
    r: &Matrix3<f64>,
    w: &Vector3<f64>,
    sp: &AttitudeSetpoint,
    tau_ext_hat: &Vector3<f64>,
    gains: &AttitudeGains,
    inertia: &Matrix3<f64>,
) -> Vector3<f64> {
    let e_r = attitude_error(r, &sp.rotation);
    let e_w = angular_velocity_error(w, r, &sp.rotation, &sp.body_rate);
    let feedforward = r.transpose() * sp.rotation * sp.body_rate;
    -gains.k_r.component_mul(&e_r) - gains.k_w.component_mul(&e_w) + w.cross(&(inertia * w))
        - inertia * (hat(w) * feedforward)
        - tau_ext_hat
}

/// Covariances of the torque observer. `q_rate` and `q_torque` are
/// continuous-time spectral densities of the rate and torque random walks;
/// `r_meas` is the discrete gyro noise covariance.
#[derive(Clone, Debug, PartialEq)]
pub struct ObserverConfig {
    pub q_rate: Matrix3<f64>,
    pub q_torque: Matrix3<f64>,
    pub r_meas: Matrix3<f64>,
    pub dt: f64,
}

impl Default for ObserverConfig {
    fn default() -> Self {
        Self {
            q_rate: Matrix3::identity() * 1e-8,
            q_torque: Matrix3::identity() * 2e-22,
            r_meas: Matrix3::identity() * 1e-4,
            dt: 5e-4,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ObserverState {
    pub rate: Vector3<f64>,
    pub torque: Vector3<f64>,
}

/// Result of the steady-state filter Riccati iteration.
#[derive(Clone, Debug)]
pub struct KalmanSolution {
    /// Gain applied to the innovation after the prediction step.
    pub gain: DMatrix<f64>,
    /// Steady a-priori covariance.
    pub p_prior: DMatrix<f64>,
    /// Steady a-posteriori covariance.
    pub p_post: DMatrix<f64>,
    pub iterations: usize,
    /// Frobenius residual of the a-priori filter Riccati equation.
    pub residual: f64,
}

const KALMAN_MAX_ITER: usize = 1_000_000;

/// Steady-state Kalman gain for `x+ = Phi x + w`, `z = H x + v`.
///
/// The a-priori filter Riccati equation is solved with the doubling form of
/// the covariance recursion: after `k` doublings the iterate equals the
/// `2^k`-th step of the plain recursion, so weakly observable problems that
/// would need millions of plain steps converge in a few dozen. Iteration stops
/// once the Frobenius change falls below `1e-12` (relative to `||P||_F` once
/// that exceeds one).
pub fn steady_state_kalman(
    phi: &DMatrix<f64>,
    h: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<KalmanSolution> {
    let n = phi.nrows();
    let eye = DMatrix::<f64>::identity(n, n);
    let r_inv = r
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::Config("singular measurement covariance".into()))?;

    let mut a = phi.transpose();
    let mut g = h.transpose() * r_inv * h;
    let mut p = q.clone();
    let mut last_change = f64::INFINITY;
    let mut converged_at = None;
    for it in 1..=KALMAN_MAX_ITER {
        let w = (&eye + &g * &p)
            .try_inverse()
            .ok_or_else(|| Error::NoConvergence { iterations: it, last_change })?;
        let a_w = &a * &w;
        let p_next = &p + a.transpose() * &p * &w * &a;
        let g_next = &g + &a_w * &g * a.transpose();
        a = &a_w * &a;
        g = (&g_next + g_next.transpose()) * 0.5;
        let p_next = (&p_next + p_next.transpose()) * 0.5;
        last_change = (&p_next - &p).norm();
        p = p_next;
        if !last_change.is_finite() {
            return Err(Error::NoConvergence { iterations: it, last_change });
        }
        if last_change <= 1e-12 * p.norm().max(1.0) {
            converged_at = Some(it);
            break;
        }
    }
    let iterations =
        converged_at.ok_or(Error::NoConvergence { iterations: KALMAN_MAX_ITER, last_change })?;

    let s = h * &p * h.transpose() + r;
    let s_inv = s
        .try_inverse()
        .ok_or_else(|| Error::Config("singular innovation covariance".into()))?;
    let gain = &p * h.transpose() * s_inv;
    let post = (&eye - &gain * h) * &p;
    let post = (&post + post.transpose()) * 0.5;
    let residual = filter_riccati_residual(phi, h, q, r, &p);
    Ok(KalmanSolution { gain, p_prior: p, p_post: post, iterations, residual })
}

/// `|| P - (Phi P Phi^T - Phi P H^T (H P H^T + R)^-1 H P Phi^T + Q) ||_F`.
pub fn filter_riccati_residual(
    phi: &DMatrix<f64>,
    h: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    p: &DMatrix<f64>,
) -> f64 {
    let s = h * p * h.transpose() + r;
    let s_inv = match s.try_inverse() {
        Some(v) => v,
        None => return f64::INFINITY,
    };
    let rhs = phi * p * phi.transpose()
        - phi * p * h.transpose() * s_inv * h * p * phi.transpose()
        + q;
    (p - rhs).norm()
}

/// Steady-state torque observer over the state `[w, tau_ext]`.
#[derive(Clone, Debug)]
pub struct TorqueObserver {
    /// 6x3 gain in physical units (rad/s and N m).
    pub gain: SMatrix<f64, 6, 3>,
    pub inertia: Matrix3<f64>,
    pub inertia_inv: Matrix3<f64>,
    pub dt: f64,
    pub iterations: usize,
    pub residual: f64,
}

impl TorqueObserver {
    /// Designs the gain. The filter is iterated in scaled coordinates where
    /// the torque channel is expressed as angular acceleration `J^-1 tau`, so
    /// both blocks of the covariance have comparable magnitude; the gain is
    /// mapped back afterwards. The discretisation of
    /// `F = [[0, I], [0, 0]]` is exact since `F^2 = 0`.
    pub fn design(inertia: &Matrix3<f64>, cfg: &ObserverConfig) -> Result<Self> {
        if !(cfg.dt > 0.0) {
            return Err(Error::Config("observer dt must be positive".into()));
        }
        let inertia_inv = inertia
            .try_inverse()
            .ok_or_else(|| Error::Config("singular inertia".into()))?;
        let dt = cfg.dt;

        let mut phi = DMatrix::<f64>::identity(6, 6);
        for i in 0..3 {
            phi[(i, 3 + i)] = dt;
        }
        let mut h = DMatrix::<f64>::zeros(3, 6);
        for i in 0..3 {
            h[(i, i)] = 1.0;
        }
        // Van Loan closed form of int_0^dt e^{Fs} Qc e^{F^T s} ds.
        let qw = &cfg.q_rate;
        let qa = inertia_inv * cfg.q_torque * inertia_inv.transpose();
        let mut qd = DMatrix::<f64>::zeros(6, 6);
        let blk_ww = qw * dt + qa * (dt.powi(3) / 3.0);
        let blk_wa = qa * (dt * dt / 2.0);
        let blk_aa = qa * dt;
        for r in 0..3 {
            for c in 0..3 {
                qd[(r, c)] = blk_ww[(r, c)];
                qd[(r, 3 + c)] = blk_wa[(r, c)];
                qd[(3 + r, c)] = blk_wa[(c, r)];
                qd[(3 + r, 3 + c)] = blk_aa[(r, c)];
            }
        }
        let rm = DMatrix::from_iterator(3, 3, cfg.r_meas.iter().copied());

        // The gain is invariant under a common scaling of Q, R and P; bring R
        // to unit size so the absolute stopping rule is meaningful.
        let scale = rm.diagonal().max();
        if !(scale > 0.0) {
            return Err(Error::Config("measurement covariance must be positive definite".into()));
        }
        let sol = steady_state_kalman(&phi, &h, &(&qd / scale), &(&rm / scale))?;
        let residual = filter_riccati_residual(&phi, &h, &qd, &rm, &(&sol.p_prior * scale));
        let mut gain = SMatrix::<f64, 6, 3>::zeros();
        for c in 0..3 {
            for r in 0..3 {
                gain[(r, c)] = sol.gain[(r, c)];
            }
            let accel_col = Vector3::new(sol.gain[(3, c)], sol.gain[(4, c)], sol.gain[(5, c)]);
            let torque_col = inertia * accel_col;
            for r in 0..3 {
                gain[(3 + r, c)] = torque_col[r];
            }
        }
        Ok(Self {
            gain,
            inertia: *inertia,
            inertia_inv,
            dt,
            iterations: sol.iterations,
            residual,
        })
    }

    /// Prediction with `u_o = tau_cmd - w_m x J w_m` (measured rate), then
    /// correction with the measured rate.
    pub fn step(&self, obs: &ObserverState, tau_cmd: &Vector3<f64>, measured_rate: &Vector3<f64>) -> ObserverState {
        let u_o = tau_cmd - measured_rate.cross(&(self.inertia * measured_rate));
        observer_step(obs, &u_o, measured_rate, &self.gain, &self.inertia_inv, self.dt)
    }
}

/// One predict/correct cycle of the torque observer.
pub fn observer_step(
    obs: &ObserverState,
    u_o: &Vector3<f64>,
    z_meas: &Vector3<f64>,
    gain: &SMatrix<f64, 6, 3>,
    inertia_inv: &Matrix3<f64>,
    dt: f64,
) -> ObserverState {
    let rate_prior = obs.rate + inertia_inv * (u_o + obs.torque) * dt;
    let innovation = z_meas - rate_prior;
    let correction = gain * innovation;
    ObserverState {
        rate: rate_prior + correction.fixed_rows::<3>(0),
        torque: obs.torque + correction.fixed_rows::<3>(3),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn rot_x(a: f64) -> Matrix3<f64> {
        Matrix3::new(1.0, 0.0, 0.0, 0.0, a.cos(), -a.sin(), 0.0, a.sin(), a.cos())
    }

    fn rot_z(a: f64) -> Matrix3<f64> {
        Matrix3::new(a.cos(), -a.sin(), 0.0, a.sin(), a.cos(), 0.0, 0.0, 0.0, 1.0)
    }

    fn rot_y(a: f64) -> Matrix3<f64> {
        Matrix3::new(a.cos(), 0.0, a.sin(), 0.0, 1.0, 0.0, -a.sin(), 0.0, a.cos())
    }

    #[test]
    fn attitude_error_cases() {
        let i = Matrix3::identity();
        assert_eq!(attitude_error(&rot_x(0.4), &rot_x(0.4)), Vector3::zeros());
        assert_relative_eq!(
            attitude_error(&rot_z(std::f64::consts::FRAC_PI_2), &i),
            Vector3::new(0.0, 0.0, 1.0),
            epsilon = 1e-15
        );
        let eps = 1e-3;
        assert_relative_eq!(
            attitude_error(&rot_x(eps), &i),
            Vector3::new(eps.sin(), 0.0, 0.0),
            epsilon = 1e-15
        );
    }

    proptest! {
        #[test]
        fn attitude_error_is_antisymmetric(a in -3.0..3.0f64, b in -1.5..1.5f64, c in -3.0..3.0f64,
                                           d in -3.0..3.0f64, e in -1.5..1.5f64, f in -3.0..3.0f64) {
            let r = rot_z(a) * rot_y(b) * rot_x(c);
            let rd = rot_z(d) * rot_y(e) * rot_x(f);
            let lhs = attitude_error(&r, &rd);
            let rhs = -attitude_error(&rd, &r);
            prop_assert!((lhs - rhs).amax() < 1e-14);
        }
    }

    #[test]
    fn angular_velocity_error_cases() {
        let w = Vector3::new(0.3, -0.2, 0.1);
        let r = rot_x(0.2);
        assert_eq!(angular_velocity_error(&w, &r, &r, &w), Vector3::zeros());
        assert_eq!(angular_velocity_error(&w, &r, &rot_z(1.0), &Vector3::zeros()), w);
        let e = angular_velocity_error(
            &Vector3::zeros(),
            &Matrix3::identity(),
            &rot_z(std::f64::consts::FRAC_PI_2),
            &Vector3::new(1.0, 0.0, 0.0),
        );
        // -Rot_z(90) * e_x = -(0, 1, 0)
        assert_relative_eq!(e, Vector3::new(0.0, -1.0, 0.0), epsilon = 1e-15);
    }

    #[test]
    fn control_torque_cases() {
        let j = Matrix3::from_diagonal(&Vector3::new(1e-7, 1e-7, 5e-8));
        let gains = AttitudeGains::from_bandwidth(&j, 50.0, 0.9);
        let sp = AttitudeSetpoint::level();
        let z = Vector3::zeros();
        let i = Matrix3::identity();
        assert_eq!(control_torque(&i, &z, &sp, &z, &gains, &j), Vector3::zeros());
        let tau_hat = Vector3::new(1e-6, -2e-6, 3e-7);
        assert_relative_eq!(control_torque(&i, &z, &sp, &tau_hat, &gains, &j), -tau_hat, epsilon = 1e-22);
        let ten = 10f64.to_radians();
        let tau = control_torque(&rot_x(ten), &z, &sp, &z, &gains, &j);
        assert_relative_eq!(tau, Vector3::new(-gains.k_r.x * ten.sin(), 0.0, 0.0), epsilon = 1e-20);
    }

    #[test]
    fn scalar_filter_matches_closed_form() {
        for (q, r) in [(0.1, 1.0), (2.0, 0.5), (1e-3, 1e-2)] {
            let one = DMatrix::from_element(1, 1, 1.0);
            let sol = steady_state_kalman(
                &one,
                &one,
                &DMatrix::from_element(1, 1, q),
                &DMatrix::from_element(1, 1, r),
            )
            .unwrap();
            // a = P + q solves a^2 - q a - q r = 0.
            let a = 0.5 * (q + (q * q + 4.0 * q * r).sqrt());
            assert_relative_eq!(sol.p_post[(0, 0)], a - q, max_relative = 1e-10);
            assert_relative_eq!(sol.gain[(0, 0)], a / (a + r), max_relative = 1e-10);
            assert!(sol.residual <= 1e-8);
        }
    }

    #[test]
    fn default_observer_design_converges() {
        let j = Matrix3::from_diagonal(&Vector3::new(1e-7, 1e-7, 5e-8));
        let obs = TorqueObserver::design(&j, &ObserverConfig::default()).unwrap();
        assert!(obs.residual <= 1e-8, "residual {}", obs.residual);
        assert!(obs.gain.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn observer_gain_vanishes_when_measurements_are_distrusted() {
        let j = Matrix3::from_diagonal(&Vector3::new(1e-7, 1e-7, 5e-8));
        let cfg = ObserverConfig { r_meas: ObserverConfig::default().r_meas * 1e12, ..Default::default() };
        let obs = TorqueObserver::design(&j, &cfg).unwrap();
        assert!(obs.gain.amax() <= 1e-6, "max gain {}", obs.gain.amax());
    }

    #[test]
    fn zero_innovation_keeps_torque_estimate() {
        let j = Matrix3::from_diagonal(&Vector3::new(1e-7, 1e-7, 5e-8));
        let obs = TorqueObserver::design(&j, &ObserverConfig::default()).unwrap();
        let s = ObserverState { rate: Vector3::new(0.1, 0.0, -0.2), torque: Vector3::new(1e-6, 0.0, 0.0) };
        let u_o = Vector3::new(-3e-7, 2e-7, 0.0);
        let predicted = s.rate + obs.inertia_inv * (u_o + s.torque) * obs.dt;
        let next = observer_step(&s, &u_o, &predicted, &obs.gain, &obs.inertia_inv, obs.dt);
        assert_eq!(next.torque, s.torque);
        assert_eq!(next.rate, predicted);
    }

    #[test]
    fn zero_gain_is_open_loop_prediction() {
        let jinv = Matrix3::identity() * 1e7;
        let mut s = ObserverState { rate: Vector3::zeros(), torque: Vector3::new(2e-7, 0.0, 0.0) };
        let g = SMatrix::<f64, 6, 3>::zeros();
        for _ in 0..100 {
            s = observer_step(&s, &Vector3::zeros(), &Vector3::new(5.0, 5.0, 5.0), &g, &jinv, 5e-4);
        }
        assert_eq!(s.torque, Vector3::new(2e-7, 0.0, 0.0));
    }

    #[test]
    fn observer_correction_is_linear_in_innovation() {
        let j = Matrix3::from_diagonal(&Vector3::new(1e-7, 1e-7, 5e-8));
        let obs = TorqueObserver::design(&j, &ObserverConfig::default()).unwrap();
        let s = ObserverState::default();
        let u = Vector3::zeros();
        let d = Vector3::new(0.01, -0.02, 0.005);
        let one = observer_step(&s, &u, &d, &obs.gain, &obs.inertia_inv, obs.dt);
        let two = observer_step(&s, &u, &(d * 2.0), &obs.gain, &obs.inertia_inv, obs.dt);
        assert_relative_eq!(two.torque, one.torque * 2.0, max_relative = 1e-15);
        assert_relative_eq!(two.rate, one.rate * 2.0, max_relative = 1e-15);
    }
}
