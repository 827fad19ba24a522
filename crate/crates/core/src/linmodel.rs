//! Hover linearization of the position dynamics with the attitude loop closed,
//! ZOH discretization, Euler conversions and box sets.
//!
//! State ordering: `[px, py, pz, vx, vy, vz, phi_I, theta_I, phi_cmd_I,
//! theta_cmd_I]`. Input ordering: `[roll-rate cmd, pitch-rate cmd, df_cmd]`.

use nalgebra::{DMatrix, DVector, Matrix3, Vector2};

use crate::error::{Error, Result};
use crate::linalg::expm;
use crate::sim::PhysicalParams;

pub const NX: usize = 10;
pub const NU: usize = 3;

pub const PX: usize = 0;
pub const VX: usize = 3;
pub const VY: usize = 4;
pub const VZ: usize = 5;
pub const PHI: usize = 6;
pub const THETA: usize = 7;
pub const PHI_CMD: usize = 8;
pub const THETA_CMD: usize = 9;

pub const U_ROLL_RATE: usize = 0;
pub const U_PITCH_RATE: usize = 1;
pub const U_THRUST: usize = 2;

/// Short names used in dumps and logs.
pub const STATE_NAMES: [&str; NX] =
    ["px", "py", "pz", "vx", "vy", "vz", "phi", "theta", "phicmd", "thetacmd"];
pub const INPUT_NAMES: [&str; NU] = ["phidot_cmd", "thetadot_cmd", "df_cmd"];

/// Intrinsic z-y-x Euler angles.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EulerZyx {
    pub psi: f64,
    pub theta: f64,
    pub phi: f64,
}

impl EulerZyx {
    pub fn new(psi: f64, theta: f64, phi: f64) -> Self {
        Self { psi, theta, phi }
    }
}

/// `R = Rz(psi) Ry(theta) Rx(phi)`.
pub fn euler_to_rotation(e: &EulerZyx) -> Matrix3<f64> {
    let (sps, cps) = e.psi.sin_cos();
    let (sth, cth) = e.theta.sin_cos();
    let (sph, cph) = e.phi.sin_cos();
    Matrix3::new(
        cps * cth,
        cps * sth * sph - sps * cph,
        cps * sth * cph + sps * sph,
        sps * cth,
        sps * sth * sph + cps * cph,
        sps * sth * cph - cps * sph,
        -sth,
        cth * sph,
        cth * cph,
    )
}

pub fn rotation_to_euler(r: &Matrix3<f64>) -> Result<EulerZyx> {
    let s = r[(2, 0)];
    if s.abs() >= 1.0 - 1e-9 {
        return Err(Error::GimbalLock(s));
    }
    Ok(EulerZyx {
        psi: r[(1, 0)].atan2(r[(0, 0)]),
        theta: (-s).asin(),
        phi: r[(2, 1)].atan2(r[(2, 2)]),
    })
}

/// Inertial-aligned roll/pitch to body values:
/// `[[cos psi, sin psi], [-sin psi, cos psi]] v`.
pub fn yaw_frame_transform(v_inertial: &Vector2<f64>, psi: f64) -> Vector2<f64> {
    let (s, c) = psi.sin_cos();
    Vector2::new(c * v_inertial.x + s * v_inertial.y, -s * v_inertial.x + c * v_inertial.y)
}

pub fn yaw_frame_transform_inverse(v_body: &Vector2<f64>, psi: f64) -> Vector2<f64> {
    let (s, c) = psi.sin_cos();
    Vector2::new(c * v_body.x - s * v_body.y, s * v_body.x + c * v_body.y)
}

/// First-order closed-loop roll/pitch response `tau x' = k u - x`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttitudeLoopParams {
    pub k_phi: f64,
    pub k_theta: f64,
    pub tau_phi: f64,
    pub tau_theta: f64,
}

impl AttitudeLoopParams {
    pub fn validate(&self) -> Result<()> {
        if [self.k_phi, self.k_theta, self.tau_phi, self.tau_theta].iter().any(|v| !(*v > 0.0)) {
            return Err(Error::Config("attitude loop parameters must be positive".into()));
        }
        Ok(())
    }
}

/// Axis-aligned box `lo <= x <= hi`. Tightening can over-shrink a box, which
/// is recorded in `empty` rather than rejected at construction.
#[derive(Clone, Debug, PartialEq)]
pub struct BoxSet {
    pub lo: DVector<f64>,
    pub hi: DVector<f64>,
    pub empty: bool,
}

impl BoxSet {
    pub fn new(lo: DVector<f64>, hi: DVector<f64>) -> Result<Self> {
        if lo.len() != hi.len() {
            return Err(Error::DimensionMismatch { expected: lo.len(), got: hi.len() });
        }
        if lo.iter().chain(hi.iter()).any(|v| v.is_nan()) {
            return Err(Error::Config("box bounds must not be NaN".into()));
        }
        let empty = lo.iter().zip(hi.iter()).any(|(l, h)| l > h);
        Ok(Self { lo, hi, empty })
    }

    /// `[-b, b]` per component.
    pub fn symmetric(bounds: &[f64]) -> Self {
        let hi = DVector::from_row_slice(bounds);
        Self { lo: -&hi, hi, empty: bounds.iter().any(|b| *b < 0.0) }
    }

    pub fn point(x: &DVector<f64>) -> Self {
        Self { lo: x.clone(), hi: x.clone(), empty: false }
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn contains(&self, x: &DVector<f64>, tol: f64) -> bool {
        !self.empty
            && x.len() == self.dim()
            && x.iter().zip(self.lo.iter().zip(self.hi.iter())).all(|(v, (l, h))| *v >= l - tol && *v <= h + tol)
    }

    pub fn intersect(&self, other: &BoxSet) -> Result<BoxSet> {
        if self.dim() != other.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), got: other.dim() });
        }
        BoxSet::new(self.lo.sup(&other.lo), self.hi.inf(&other.hi))
    }

    pub fn width(&self) -> DVector<f64> {
        &self.hi - &self.lo
    }

    /// Index, lower and upper bound of the first component with `lo > hi`.
    pub fn first_empty_dim(&self) -> Option<(usize, f64, f64)> {
        (0..self.dim()).find(|&i| self.lo[i] > self.hi[i]).map(|i| (i, self.lo[i], self.hi[i]))
    }
}

#[derive(Clone, Debug)]
pub struct DiscreteLtiModel {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub tc: f64,
    pub w: BoxSet,
}

impl DiscreteLtiModel {
    pub fn step(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        &self.a * x + &self.b * u
    }

    /// Text dump: `Tc`, `A` and `B` row-major, then `W` bounds, one value
    /// per token in shortest round-trip form.
    pub fn to_text(&self) -> String {
        let mut s = String::from("#linmodel=1\n");
        s.push_str(&format!("Tc {}\n", self.tc));
        for (name, m) in [("A", &self.a), ("B", &self.b)] {
            s.push_str(&format!("{} {} {}\n", name, m.nrows(), m.ncols()));
            for r in 0..m.nrows() {
                let row: Vec<String> = (0..m.ncols()).map(|c| format!("{}", m[(r, c)])).collect();
                s.push_str(&row.join(" "));
                s.push('\n');
            }
        }
        s.push_str(&format!("W {}\n", self.w.dim()));
        for i in 0..self.w.dim() {
            s.push_str(&format!("{} {} {}\n", STATE_NAMES[i], self.w.lo[i], self.w.hi[i]));
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |m: &str| Error::Config(format!("model dump: {m}"));
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        match lines.next() {
            Some("#linmodel=1") => {}
            other => return Err(Error::FormatVersionMismatch(other.unwrap_or("").to_string())),
        }
        let num = |t: &str| t.parse::<f64>().map_err(|_| bad(&format!("bad number {t:?}")));
        let tc_line = lines.next().ok_or_else(|| bad("missing Tc"))?;
        let tc = num(tc_line.strip_prefix("Tc ").ok_or_else(|| bad("missing Tc"))?)?;
        let mut mats = Vec::new();
        for expect in ["A", "B"] {
            let head: Vec<&str> = lines.next().ok_or_else(|| bad("missing matrix"))?.split_whitespace().collect();
            if head.len() != 3 || head[0] != expect {
                return Err(bad(&format!("expected {expect} header")));
            }
            let nr: usize = head[1].parse().map_err(|_| bad("rows"))?;
            let nc: usize = head[2].parse().map_err(|_| bad("cols"))?;
            let mut m = DMatrix::zeros(nr, nc);
            for r in 0..nr {
                let row: Vec<&str> = lines.next().ok_or_else(|| bad("short matrix"))?.split_whitespace().collect();
                if row.len() != nc {
                    return Err(Error::DimensionMismatch { expected: nc, got: row.len() });
                }
                for c in 0..nc {
                    m[(r, c)] = num(row[c])?;
                }
            }
            mats.push(m);
        }
        let head: Vec<&str> = lines.next().ok_or_else(|| bad("missing W"))?.split_whitespace().collect();
        if head.len() != 2 || head[0] != "W" {
            return Err(bad("expected W header"));
        }
        let n: usize = head[1].parse().map_err(|_| bad("W dim"))?;
        let mut lo = DVector::zeros(n);
        let mut hi = DVector::zeros(n);
        for i in 0..n {
            let row: Vec<&str> = lines.next().ok_or_else(|| bad("short W"))?.split_whitespace().collect();
            if row.len() != 3 {
                return Err(bad("W row"));
            }
            lo[i] = num(row[1])?;
            hi[i] = num(row[2])?;
        }
        let b = mats.pop().unwrap();
        let a = mats.pop().unwrap();
        Ok(Self { a, b, tc, w: BoxSet::new(lo, hi)? })
    }
}

/// Continuous hover model `(Ac, Bc)`. Drag is left out.
pub fn build_continuous(params: &PhysicalParams, att: &AttitudeLoopParams) -> (DMatrix<f64>, DMatrix<f64>) {
    let g = params.gravity;
    let mut ac = DMatrix::zeros(NX, NX);
    let mut bc = DMatrix::zeros(NX, NU);
    for i in 0..3 {
        ac[(PX + i, VX + i)] = 1.0;
    }
    ac[(VX, THETA)] = g;
    ac[(VY, PHI)] = -g;
    ac[(PHI, PHI)] = -1.0 / att.tau_phi;
    ac[(PHI, PHI_CMD)] = att.k_phi / att.tau_phi;
    ac[(THETA, THETA)] = -1.0 / att.tau_theta;
    ac[(THETA, THETA_CMD)] = att.k_theta / att.tau_theta;
    bc[(VZ, U_THRUST)] = 1.0;
    bc[(PHI_CMD, U_ROLL_RATE)] = 1.0;
    bc[(THETA_CMD, U_PITCH_RATE)] = 1.0;
    (ac, bc)
}

/// Exact zero-order-hold discretization via the exponential of
/// `[[Ac, Bc], [0, 0]] * Tc`.
pub fn discretize_zoh(ac: &DMatrix<f64>, bc: &DMatrix<f64>, tc: f64) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    if !(tc > 0.0) {
        return Err(Error::Config(format!("sampling period must be positive, got {tc}")));
    }
    let n = ac.nrows();
    let m = bc.ncols();
    if ac.ncols() != n || bc.nrows() != n {
        return Err(Error::DimensionMismatch { expected: n, got: bc.nrows() });
    }
    let mut aug = DMatrix::zeros(n + m, n + m);
    aug.view_mut((0, 0), (n, n)).copy_from(&(ac * tc));
    aug.view_mut((0, n), (n, m)).copy_from(&(bc * tc));
    let e = expm(&aug);
    Ok((e.view((0, 0), (n, n)).into_owned(), e.view((0, n), (n, m)).into_owned()))
}

/// Additive disturbance box: a bounded force acting for one period adds at
/// most `(f/m) Tc` to each velocity component.
pub fn disturbance_set(f_ext_bar: f64, params: &PhysicalParams, tc: f64) -> Result<BoxSet> {
    if !(f_ext_bar >= 0.0) {
        return Err(Error::Config(format!("disturbance bound must be nonnegative, got {f_ext_bar}")));
    }
    let dv = f_ext_bar / params.mass * tc;
    let mut bounds = [0.0; NX];
    bounds[VX..=VZ].fill(dv);
    Ok(BoxSet::symmetric(&bounds))
}

/// Builds the discrete model with its disturbance box.
pub fn build_model(
    params: &PhysicalParams,
    att: &AttitudeLoopParams,
    tc: f64,
    f_ext_bar: f64,
) -> Result<DiscreteLtiModel> {
    att.validate()?;
    let (ac, bc) = build_continuous(params, att);
    let (a, b) = discretize_zoh(&ac, &bc, tc)?;
    Ok(DiscreteLtiModel { a, b, tc, w: disturbance_set(f_ext_bar, params, tc)? })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn att(k: f64, tau: f64) -> AttitudeLoopParams {
        AttitudeLoopParams { k_phi: k, k_theta: k, tau_phi: tau, tau_theta: tau }
    }

    #[test]
    fn euler_single_axis() {
        assert_eq!(euler_to_rotation(&EulerZyx::default()), Matrix3::identity());
        let r = euler_to_rotation(&EulerZyx::new(std::f64::consts::FRAC_PI_2, 0.0, 0.0));
        assert_relative_eq!(r, Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0), epsilon = 1e-15);
    }

    #[test]
    fn gimbal_lock_is_reported() {
        let r = euler_to_rotation(&EulerZyx::new(0.3, std::f64::consts::FRAC_PI_2, 0.1));
        assert!(matches!(rotation_to_euler(&r), Err(Error::GimbalLock(_))));
    }

    proptest! {
        #[test]
        fn euler_round_trip(psi in -3.1..3.1f64, theta in -1.5..1.5f64, phi in -3.1..3.1f64) {
            let e = EulerZyx::new(psi, theta, phi);
            let back = rotation_to_euler(&euler_to_rotation(&e)).unwrap();
            prop_assert!((back.psi - psi).abs() <= 1e-10);
            prop_assert!((back.theta - theta).abs() <= 1e-10);
            prop_assert!((back.phi - phi).abs() <= 1e-10);
        }

        #[test]
        fn yaw_transform_inverse(a in -1.0..1.0f64, b in -1.0..1.0f64, psi in -6.0..6.0f64) {
            let v = Vector2::new(a, b);
            let w = yaw_frame_transform_inverse(&yaw_frame_transform(&v, psi), psi);
            prop_assert!((w - v).amax() <= 1e-14);
        }

        #[test]
        fn yaw_from_rotation_is_consistent(psi in -3.1..3.1f64, theta in -1.0..1.0f64, phi in -1.0..1.0f64,
                                           a in -1.0..1.0f64, b in -1.0..1.0f64) {
            let e = rotation_to_euler(&euler_to_rotation(&EulerZyx::new(psi, theta, phi))).unwrap();
            let v = Vector2::new(a, b);
            let direct = yaw_frame_transform(&v, psi);
            let via = yaw_frame_transform(&v, e.psi);
            prop_assert!((direct - via).amax() <= 1e-12);
        }
    }

    #[test]
    fn yaw_transform_cases() {
        let v = Vector2::new(0.3, -0.7);
        assert_eq!(yaw_frame_transform(&v, 0.0), v);
        let w = yaw_frame_transform(&Vector2::new(1.0, 0.0), std::f64::consts::FRAC_PI_2);
        assert_relative_eq!(w, Vector2::new(0.0, -1.0), epsilon = 1e-15);
    }

    #[test]
    fn continuous_structure() {
        let p = PhysicalParams::default();
        let (ac, bc) = build_continuous(&p, &att(1.0, 0.1));
        assert!(ac.column(PX).iter().all(|v| *v == 0.0));
        assert_relative_eq!(ac[(THETA, THETA)], -10.0, epsilon = 1e-12);
        assert_relative_eq!(ac[(THETA, THETA_CMD)], 10.0, epsilon = 1e-12);
        assert_eq!(bc[(VZ, U_THRUST)], 1.0);
        for r in VX..=VZ {
            for c in 0..NU {
                if (r, c) != (VZ, U_THRUST) {
                    assert_eq!(bc[(r, c)], 0.0);
                }
            }
        }
        assert_eq!(ac[(VX, THETA)], p.gravity);
        assert_eq!(ac[(VY, PHI)], -p.gravity);
    }

    #[test]
    fn zoh_of_zero_dynamics() {
        let ac = DMatrix::zeros(3, 3);
        let bc = DMatrix::from_row_slice(3, 1, &[1.0, -2.0, 0.5]);
        let (a, b) = discretize_zoh(&ac, &bc, 0.02).unwrap();
        assert_eq!(a, DMatrix::identity(3, 3));
        assert_relative_eq!(b, &bc * 0.02, epsilon = 1e-15);
    }

    #[test]
    fn zoh_double_integrator() {
        let tc = 0.02;
        let ac = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]);
        let bc = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
        let (a, b) = discretize_zoh(&ac, &bc, tc).unwrap();
        assert_relative_eq!(a, DMatrix::from_row_slice(2, 2, &[1.0, tc, 0.0, 1.0]), epsilon = 1e-15);
        assert_relative_eq!(b, DMatrix::from_row_slice(2, 1, &[tc * tc / 2.0, tc]), epsilon = 1e-15);
    }

    #[test]
    fn zoh_half_steps_compose() {
        let p = PhysicalParams::default();
        let (ac, bc) = build_continuous(&p, &att(0.9, 0.04));
        let (a, b) = discretize_zoh(&ac, &bc, 0.02).unwrap();
        let (ah, bh) = discretize_zoh(&ac, &bc, 0.01).unwrap();
        assert_relative_eq!(a, &ah * &ah, epsilon = 1e-9);
        assert_relative_eq!(b, &ah * &bh + &bh, epsilon = 1e-9);
    }

    #[test]
    fn zoh_eigenvalue_map() {
        let p = PhysicalParams::default();
        let a_params = AttitudeLoopParams { k_phi: 1.0, k_theta: 0.95, tau_phi: 0.03, tau_theta: 0.05 };
        let (ac, bc) = build_continuous(&p, &a_params);
        let tc = 0.02;
        let (a, _) = discretize_zoh(&ac, &bc, tc).unwrap();
        // The attitude block is upper-triangular, so its eigenvalues are the
        // diagonal entries.
        assert_relative_eq!(a[(PHI, PHI)], (-tc / 0.03f64).exp(), epsilon = 1e-9);
        assert_relative_eq!(a[(THETA, THETA)], (-tc / 0.05f64).exp(), epsilon = 1e-9);
        assert_relative_eq!(a[(PHI_CMD, PHI_CMD)], 1.0, epsilon = 1e-12);
        assert_eq!(a[(PHI_CMD, PHI)], 0.0);
    }

    #[test]
    fn disturbance_box() {
        let p = PhysicalParams::default();
        let w0 = disturbance_set(0.0, &p, 0.02).unwrap();
        assert!(w0.lo.iter().chain(w0.hi.iter()).all(|v| *v == 0.0));
        let w = disturbance_set(0.15 * p.mass * p.gravity, &p, 0.02).unwrap();
        for i in 0..NX {
            if (VX..=VZ).contains(&i) {
                assert_relative_eq!(w.hi[i], 0.15 * 9.81 * 0.02, epsilon = 1e-15);
                assert_relative_eq!(w.lo[i], -0.15 * 9.81 * 0.02, epsilon = 1e-15);
            } else {
                assert_eq!((w.lo[i], w.hi[i]), (0.0, 0.0));
            }
        }
        let w2 = disturbance_set(0.3 * p.mass * p.gravity, &p, 0.02).unwrap();
        assert_relative_eq!(w2.hi, &w.hi * 2.0, epsilon = 1e-15);
        assert!(disturbance_set(-1.0, &p, 0.02).is_err());
    }

    #[test]
    fn box_set_basics() {
        let b = BoxSet::symmetric(&[1.0, 2.0]);
        assert!(b.contains(&DVector::from_row_slice(&[1.0, -2.0]), 0.0));
        assert!(!b.contains(&DVector::from_row_slice(&[1.1, 0.0]), 0.0));
        let c = BoxSet::new(DVector::from_row_slice(&[0.5, 3.0]), DVector::from_row_slice(&[2.0, 4.0])).unwrap();
        let i = b.intersect(&c).unwrap();
        assert!(i.empty);
        assert_eq!(i.first_empty_dim(), Some((1, 3.0, 2.0)));
    }

    #[test]
    fn model_dump_round_trip() {
        let p = PhysicalParams::default();
        let m = build_model(&p, &att(0.97, 0.045), 0.02, 0.15 * p.weight()).unwrap();
        let text = m.to_text();
        let back = DiscreteLtiModel::from_text(&text).unwrap();
        assert_eq!(back.a, m.a);
        assert_eq!(back.b, m.b);
        assert_eq!(back.w, m.w);
        assert_eq!(back.to_text(), text);
    }
}
