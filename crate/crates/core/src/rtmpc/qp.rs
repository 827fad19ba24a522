//! Dense strictly convex QP with inequality constraints,
//!
//! ```text
//! min 1/2 z'Hz + g'z   s.t.  C z >= b,
//! ```
//!
//! solved by the Goldfarb-Idnani dual active-set method. The method starts
//! from the unconstrained minimiser and adds violated constraints one at a
//! time while keeping the multipliers dual feasible, so it needs no feasible
//! starting point and detects infeasibility directly.
//!
//! The Cholesky factor of `H` and `L^-1 C'` are computed once. Each step
//! recomputes the projection onto the active set with a small QR
//! factorisation instead of updating factors, which is plenty for the
//! handful of active constraints seen in tracking problems.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct QpSolution {
    pub z: DVector<f64>,
    /// One multiplier per constraint row, zero for inactive rows.
    pub lambda: DVector<f64>,
    pub active: Vec<usize>,
    pub iterations: usize,
    /// `||H z + g - C' lambda||_inf / max(1, ||g||_inf, ||H z||_inf)`.
    pub kkt_residual: f64,
    /// Smallest `c_j z - b_j` over all rows (negative if violated).
    pub min_slack: f64,
}

/// QP data that does not change between solves: Hessian, constraint rows
/// and their factorisations.
#[derive(Clone, Debug)]
pub struct DenseQp {
    pub h: DMatrix<f64>,
    /// Constraint rows, one per row of the matrix.
    pub c: DMatrix<f64>,
    l_inv: DMatrix<f64>,
    /// `L^-1 C'`, one column per constraint.
    m_all: DMatrix<f64>,
    pub max_iter: usize,
}

const FEAS_TOL: f64 = 1e-9;

impl DenseQp {
    pub fn new(h: DMatrix<f64>, c: DMatrix<f64>) -> Result<Self> {
        let n = h.nrows();
        if h.ncols() != n || c.ncols() != n {
            return Err(Error::DimensionMismatch { expected: n, got: c.ncols() });
        }
        let chol = h
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Config("QP Hessian is not positive definite".into()))?;
        let l_inv = chol
            .l()
            .solve_lower_triangular(&DMatrix::identity(n, n))
            .ok_or_else(|| Error::Config("singular Cholesky factor".into()))?;
        let m_all = &l_inv * c.transpose();
        let max_iter = 10 * (n + c.nrows()) + 100;
        Ok(Self { h, c, l_inv, m_all, max_iter })
    }

    pub fn n_vars(&self) -> usize {
        self.h.nrows()
    }

    pub fn n_constraints(&self) -> usize {
        self.c.nrows()
    }

    /// Solves for the given linear term and right-hand side. On failure the
    /// error names the constraint that could not be satisfied.
    pub fn solve(&self, g: &DVector<f64>, b: &DVector<f64>) -> Result<QpSolution> {
        let n = self.n_vars();
        let m = self.n_constraints();
        if g.len() != n {
            return Err(Error::DimensionMismatch { expected: n, got: g.len() });
        }
        if b.len() != m {
            return Err(Error::DimensionMismatch { expected: m, got: b.len() });
        }
        // x = -H^-1 g = -L^-T L^-1 g
        let mut x = -(self.l_inv.transpose() * (&self.l_inv * g));
        let mut active: Vec<usize> = Vec::new();
        let mut u: Vec<f64> = Vec::new();
        let mut iterations = 0usize;

        loop {
            let slack = &self.c * &x - b;
            let candidate = slack
                .iter()
                .enumerate()
                .filter(|(j, _)| !active.contains(j))
                .min_by(|a, b| a.1.total_cmp(b.1));
            let p = match candidate {
                Some((p, s)) if *s < -FEAS_TOL => p,
                _ => break,
            };
            let mut u_p = 0.0;
            loop {
                iterations += 1;
                if iterations > self.max_iter {
                    return Err(Error::MaxIter(self.max_iter));
                }
                let mp = self.m_all.column(p).into_owned();
                let (r, zt) = self.project(&active, &mp);
                let zt_sq = zt.norm_squared();
                let step_dir = self.l_inv.tr_mul(&zt);

                let mut t1 = f64::INFINITY;
                let mut block = None;
                for (i, ri) in r.iter().enumerate() {
                    if *ri > 1e-14 {
                        let t = u[i] / ri;
                        if t < t1 {
                            t1 = t;
                            block = Some(i);
                        }
                    }
                }
                let s_p = (self.c.row(p) * &x)[0] - b[p];
                let t2 = if zt_sq > 1e-14 * mp.norm_squared().max(1e-300) { -s_p / zt_sq } else { f64::INFINITY };

                if t1.is_infinite() && t2.is_infinite() {
                    return Err(Error::Infeasible(format!("constraint row {p} cannot be satisfied (slack {s_p:e})")));
                }
                if t2.is_infinite() {
                    for (ui, ri) in u.iter_mut().zip(r.iter()) {
                        *ui -= t1 * ri;
                    }
                    u_p += t1;
                    let k = block.expect("finite t1 has a blocking index");
                    active.remove(k);
                    u.remove(k);
                    continue;
                }
                let t = t1.min(t2);
                x += &step_dir * t;
                for (ui, ri) in u.iter_mut().zip(r.iter()) {
                    *ui -= t * ri;
                }
                u_p += t;
                if t2 <= t1 {
                    active.push(p);
                    u.push(u_p);
                    break;
                }
                let k = block.expect("partial step has a blocking index");
                active.remove(k);
                u.remove(k);
            }
        }

        let mut lambda = DVector::zeros(m);
        for (j, uj) in active.iter().zip(u.iter()) {
            lambda[*j] = uj.max(0.0);
        }
        let hx = &self.h * &x;
        let stat = &hx + g - self.c.tr_mul(&lambda);
        let scale = 1f64.max(g.amax()).max(hx.amax());
        let kkt_residual = stat.amax() / scale;
        let min_slack = if m > 0 { (&self.c * &x - b).min() } else { f64::INFINITY };
        Ok(QpSolution { z: x, lambda, active, iterations, kkt_residual, min_slack })
    }

    /// Multipliers of `mp` on the active columns (least squares) and the
    /// residual orthogonal to them.
    fn project(&self, active: &[usize], mp: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        if active.is_empty() {
            return (DVector::zeros(0), mp.clone());
        }
        let n = self.n_vars();
        let mut ma = DMatrix::zeros(n, active.len());
        for (k, j) in active.iter().enumerate() {
            ma.set_column(k, &self.m_all.column(*j));
        }
        let qr = ma.clone().qr();
        let qt_m = qr.q().tr_mul(mp);
        let r = qr
            .r()
            .solve_upper_triangular(&qt_m)
            .unwrap_or_else(|| DVector::zeros(active.len()));
        let zt = mp - ma * &r;
        (r, zt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn unconstrained_minimiser() {
        let h = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let g = DVector::from_row_slice(&[-1.0, 0.3]);
        let qp = DenseQp::new(h.clone(), DMatrix::zeros(0, 2)).unwrap();
        let s = qp.solve(&g, &DVector::zeros(0)).unwrap();
        assert_relative_eq!(&h * &s.z, -g, epsilon = 1e-12);
    }

    #[test]
    fn single_active_bound() {
        // min (z0 - 2)^2 + (z1 - 1)^2  s.t.  z0 <= 1
        let h = DMatrix::identity(2, 2) * 2.0;
        let g = DVector::from_row_slice(&[-4.0, -2.0]);
        let c = DMatrix::from_row_slice(1, 2, &[-1.0, 0.0]);
        let qp = DenseQp::new(h, c).unwrap();
        let s = qp.solve(&g, &DVector::from_row_slice(&[-1.0])).unwrap();
        assert_relative_eq!(s.z, DVector::from_row_slice(&[1.0, 1.0]), epsilon = 1e-12);
        assert_relative_eq!(s.lambda[0], 2.0, epsilon = 1e-12);
        assert!(s.kkt_residual < 1e-12);
    }

    #[test]
    fn conflicting_bounds_are_infeasible() {
        let h = DMatrix::identity(1, 1);
        let c = DMatrix::from_row_slice(2, 1, &[1.0, -1.0]);
        let qp = DenseQp::new(h, c).unwrap();
        let r = qp.solve(&DVector::zeros(1), &DVector::from_row_slice(&[1.0, 0.0]));
        assert!(matches!(r, Err(Error::Infeasible(_))));
    }

    #[test]
    fn redundant_constraint_stays_inactive() {
        let h = DMatrix::identity(2, 2);
        let g = DVector::zeros(2);
        let c = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 0.0]);
        let b = DVector::from_row_slice(&[1.0, 2.0]);
        let qp = DenseQp::new(h, c).unwrap();
        let s = qp.solve(&g, &b).unwrap();
        assert_relative_eq!(s.z, DVector::from_row_slice(&[2.0, 0.0]), epsilon = 1e-12);
        assert!(s.min_slack >= -1e-12);
        assert!(s.kkt_residual < 1e-12);
    }
}
