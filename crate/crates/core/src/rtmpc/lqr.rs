//! Infinite-horizon discrete LQR used as terminal cost and ancillary gain.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::linalg::spectral_radius;

#[derive(Clone, Debug)]
pub struct LqrSolution {
    /// Gain in `u = K x` (sign included).
    pub k: DMatrix<f64>,
    pub p: DMatrix<f64>,
    pub iterations: usize,
    pub residual: f64,
    pub spectral_radius: f64,
}

const LQR_MAX_ITER: usize = 1_000_000;

/// `|| P - (Q + A'PA - A'PB (R + B'PB)^-1 B'PA) ||_F`.
pub fn dare_residual(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    p: &DMatrix<f64>,
) -> f64 {
    match riccati_map(a, b, q, r, p) {
        Some((next, _)) => (p - next).norm(),
        None => f64::INFINITY,
    }
}

fn riccati_map(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    p: &DMatrix<f64>,
) -> Option<(DMatrix<f64>, DMatrix<f64>)> {
    let bt_p = b.transpose() * p;
    let s = r + &bt_p * b;
    let chol = s.cholesky()?;
    let k = -chol.solve(&(&bt_p * a));
    let next = q + a.transpose() * p * a + a.transpose() * bt_p.transpose() * &k;
    Some(((&next + next.transpose()) * 0.5, k))
}

/// Solves the DARE by fixed-point value iteration from `P = Q` and returns
/// `K = -(R + B'PB)^-1 B'PA`.
pub fn lqr_design(a: &DMatrix<f64>, b: &DMatrix<f64>, q: &DMatrix<f64>, r: &DMatrix<f64>) -> Result<LqrSolution> {
    let n = a.nrows();
    if a.ncols() != n || b.nrows() != n || q.shape() != (n, n) || r.shape() != (b.ncols(), b.ncols()) {
        return Err(Error::DimensionMismatch { expected: n, got: b.nrows() });
    }
    let mut p = q.clone();
    let mut last_change = f64::INFINITY;
    for it in 1..=LQR_MAX_ITER {
        let (next, _) = riccati_map(a, b, q, r, &p)
            .ok_or_else(|| Error::NotStabilizable("R + B'PB lost positive definiteness".into()))?;
        last_change = (&next - &p).norm();
        p = next;
        if !p.norm().is_finite() || p.norm() > 1e15 {
            return Err(Error::NotStabilizable(format!("value iteration diverged after {it} steps")));
        }
        if last_change <= 1e-13 * p.norm().max(1.0) {
            let (_, k) = riccati_map(a, b, q, r, &p).expect("checked above");
            let residual = dare_residual(a, b, q, r, &p);
            let rho = spectral_radius(&(a + b * &k));
            if !(rho < 1.0) {
                return Err(Error::NotStabilizable(format!("closed-loop spectral radius {rho}")));
            }
            if residual > 1e-8 {
                return Err(Error::NotStabilizable(format!("Riccati residual stalled at {residual:e}")));
            }
            return Ok(LqrSolution { k, p, iterations: it, residual, spectral_radius: rho });
        }
    }
    Err(Error::NoConvergence { iterations: LQR_MAX_ITER, last_change })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn scalar(v: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, v)
    }

    #[test]
    fn golden_ratio() {
        let sol = lqr_design(&scalar(1.0), &scalar(1.0), &scalar(1.0), &scalar(1.0)).unwrap();
        let phi = (1.0 + 5f64.sqrt()) / 2.0;
        assert_relative_eq!(sol.p[(0, 0)], phi, epsilon = 1e-9);
        assert_relative_eq!(sol.k[(0, 0)], -phi / (1.0 + phi), epsilon = 1e-12);
        assert!(sol.residual <= 1e-8);
    }

    #[test]
    fn vanishing_state_cost() {
        let sol = lqr_design(&scalar(0.5), &scalar(1.0), &scalar(1e-12), &scalar(1.0)).unwrap();
        assert!(sol.p[(0, 0)] < 2e-12);
        assert!(sol.k[(0, 0)].abs() < 1e-12);
    }

    #[test]
    fn unstabilizable_pair_is_rejected() {
        let a = DMatrix::from_row_slice(2, 2, &[1.2, 0.0, 0.0, 0.5]);
        let b = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
        let q = DMatrix::identity(2, 2);
        assert!(matches!(lqr_design(&a, &b, &q, &scalar(1.0)), Err(Error::NotStabilizable(_))));
    }

    #[test]
    fn double_integrator_is_stabilised() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.0, 1.0]);
        let b = DMatrix::from_row_slice(2, 1, &[0.005, 0.1]);
        let sol = lqr_design(&a, &b, &DMatrix::identity(2, 2), &scalar(0.1)).unwrap();
        assert!(sol.spectral_radius < 1.0);
        assert!(sol.residual <= 1e-8);
    }
}
