//! Robust tube MPC: terminal ingredients, tightened constraints, the
//! condensed tracking QP and the ancillary controller.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linmodel::{BoxSet, DiscreteLtiModel, INPUT_NAMES, STATE_NAMES};
use crate::rtmpc::lqr::{lqr_design, LqrSolution};
use crate::rtmpc::qp::DenseQp;
use crate::rtmpc::tube::{compute_tube, half_widths, tighten, TubeConfig};

/// Stage weights `Qx` (state) and `Ru` (input).
#[derive(Clone, Debug)]
pub struct CostParams {
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
}

impl CostParams {
    pub fn diagonal(q: &[f64], r: &[f64]) -> Self {
        Self {
            q: DMatrix::from_diagonal(&DVector::from_row_slice(q)),
            r: DMatrix::from_diagonal(&DVector::from_row_slice(r)),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, m) in [("Qx", &self.q), ("Ru", &self.r)] {
            if (m - m.transpose()).amax() > 1e-12 * m.amax().max(1.0) || m.clone().cholesky().is_none() {
                return Err(Error::Config(format!("{name} must be symmetric positive definite")));
            }
        }
        Ok(())
    }
}

/// LQR gain and terminal cost, the tube and the tightened sets.
#[derive(Clone, Debug)]
pub struct TubeController {
    pub k: DMatrix<f64>,
    pub p: DMatrix<f64>,
    pub z: BoxSet,
    pub x: BoxSet,
    pub u: BoxSet,
    pub x_tight: BoxSet,
    pub u_tight: BoxSet,
    pub lqr_residual: f64,
    pub spectral_radius: f64,
}

impl TubeController {
    pub fn design(
        model: &DiscreteLtiModel,
        cost: &CostParams,
        x: &BoxSet,
        u: &BoxSet,
        tube_cfg: &TubeConfig,
    ) -> Result<Self> {
        cost.validate()?;
        let lqr = lqr_design(&model.a, &model.b, &cost.q, &cost.r)?;
        let a_k = &model.a + &model.b * &lqr.k;
        let z = compute_tube(&a_k, &model.w, tube_cfg)?;
        Self::from_parts(&lqr, z, x.clone(), u.clone())
    }

    pub fn from_parts(lqr: &LqrSolution, z: BoxSet, x: BoxSet, u: BoxSet) -> Result<Self> {
        let (x_tight, u_tight) = tighten(&x, &u, &z, &lqr.k)?;
        Ok(Self {
            k: lqr.k.clone(),
            p: lqr.p.clone(),
            z,
            x,
            u,
            x_tight,
            u_tight,
            lqr_residual: lqr.residual,
            spectral_radius: lqr.spectral_radius,
        })
    }
}

/// Nominal plan returned by the tracking QP.
#[derive(Clone, Debug)]
pub struct SafePlan {
    pub x_bar: Vec<DVector<f64>>,
    pub u_bar: Vec<DVector<f64>>,
    pub kkt_residual: f64,
    /// Max deviation between the condensed prediction and a rollout of the
    /// dynamics with the returned inputs.
    pub dynamics_residual: f64,
    pub iterations: usize,
    pub n_active: usize,
}

impl SafePlan {
    /// The plan one step later: drop the first stage, repeat the last input
    /// and extend the state with the model.
    pub fn shifted(&self, model: &DiscreteLtiModel) -> SafePlan {
        let mut x_bar: Vec<DVector<f64>> = self.x_bar[1..].to_vec();
        let mut u_bar: Vec<DVector<f64>> = self.u_bar[1..].to_vec();
        let last_u = self.u_bar.last().expect("plans have at least one input").clone();
        let last_x = self.x_bar.last().expect("plans have at least one state");
        x_bar.push(model.step(last_x, &last_u));
        u_bar.push(last_u);
        SafePlan { x_bar, u_bar, ..self.clone() }
    }
}

/// `u = u_bar_0 + K (x - x_bar_0)`.
pub fn ancillary(x_t: &DVector<f64>, plan: &SafePlan, k: &DMatrix<f64>) -> DVector<f64> {
    &plan.u_bar[0] + k * (x_t - &plan.x_bar[0])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Row {
    Initial { dim: usize, upper: bool },
    Input { stage: usize, dim: usize, upper: bool },
    State { stage: usize, dim: usize, upper: bool },
}

/// The condensed tracking QP. Decision vector: `[x_bar_0, u_0, ..., u_{N-1}]`.
#[derive(Clone, Debug)]
pub struct TrackingQp {
    pub horizon: usize,
    pub model: DiscreteLtiModel,
    pub cost: CostParams,
    pub tube: TubeController,
    /// `x_bar_i = S_i z`.
    predict: Vec<DMatrix<f64>>,
    /// `[S_0' W_0, ..., S_N' W_N]`, the map from the stacked reference to `-g/2`.
    ref_map: DMatrix<f64>,
    qp: DenseQp,
    rows: Vec<Row>,
    /// Right-hand side of the fixed rows; initial-state rows are filled per solve.
    b_fixed: DVector<f64>,
}

impl TrackingQp {
    pub fn new(model: &DiscreteLtiModel, cost: &CostParams, tube: &TubeController, horizon: usize) -> Result<Self> {
        if horizon == 0 {
            return Err(Error::Config("horizon must be at least one step".into()));
        }
        cost.validate()?;
        let n = model.a.nrows();
        let m = model.b.ncols();
        let nz = n + horizon * m;

        let mut predict = Vec::with_capacity(horizon + 1);
        let mut s = DMatrix::zeros(n, nz);
        s.view_mut((0, 0), (n, n)).copy_from(&DMatrix::identity(n, n));
        predict.push(s.clone());
        for i in 0..horizon {
            let mut next = &model.a * &s;
            let mut blk = next.view_mut((0, n + i * m), (n, m));
            blk += &model.b;
            s = next;
            predict.push(s.clone());
        }

        let mut h = DMatrix::zeros(nz, nz);
        let mut ref_map = DMatrix::zeros(nz, n * (horizon + 1));
        for (i, si) in predict.iter().enumerate() {
            let w = if i < horizon { &cost.q } else { &tube.p };
            let st_w = si.transpose() * w;
            h += &st_w * si;
            ref_map.view_mut((0, i * n), (nz, n)).copy_from(&st_w);
        }
        for i in 0..horizon {
            let mut blk = h.view_mut((n + i * m, n + i * m), (m, m));
            blk += &cost.r;
        }
        h *= 2.0;
        let h = (&h + h.transpose()) * 0.5;

        let mut rows = Vec::new();
        let mut c_rows: Vec<DVector<f64>> = Vec::new();
        let mut b_fixed = Vec::new();
        for dim in 0..n {
            for upper in [false, true] {
                let mut c = DVector::zeros(nz);
                c[dim] = if upper { -1.0 } else { 1.0 };
                rows.push(Row::Initial { dim, upper });
                c_rows.push(c);
                b_fixed.push(0.0);
            }
        }
        let ut = &tube.u_tight;
        for stage in 0..horizon {
            for dim in 0..m {
                for (upper, bound) in [(false, ut.lo[dim]), (true, ut.hi[dim])] {
                    if !bound.is_finite() {
                        continue;
                    }
                    let mut c = DVector::zeros(nz);
                    let col = n + stage * m + dim;
                    c[col] = if upper { -1.0 } else { 1.0 };
                    rows.push(Row::Input { stage, dim, upper });
                    c_rows.push(c);
                    b_fixed.push(if upper { -bound } else { bound });
                }
            }
        }
        let xt = &tube.x_tight;
        for stage in 1..=horizon {
            for dim in 0..n {
                let row = predict[stage].row(dim).transpose();
                let norm = row.norm();
                if norm == 0.0 {
                    continue;
                }
                for (upper, bound) in [(false, xt.lo[dim]), (true, xt.hi[dim])] {
                    if !bound.is_finite() {
                        continue;
                    }
                    let sign = if upper { -1.0 } else { 1.0 };
                    rows.push(Row::State { stage, dim, upper });
                    c_rows.push(&row * (sign / norm));
                    b_fixed.push(sign * bound / norm);
                }
            }
        }
        let mut c = DMatrix::zeros(c_rows.len(), nz);
        for (i, r) in c_rows.iter().enumerate() {
            c.set_row(i, &r.transpose());
        }
        let qp = DenseQp::new(h, c)?;
        Ok(Self {
            horizon,
            model: model.clone(),
            cost: cost.clone(),
            tube: tube.clone(),
            predict,
            ref_map,
            qp,
            rows,
            b_fixed: DVector::from_vec(b_fixed),
        })
    }

    pub fn n_constraints(&self) -> usize {
        self.rows.len()
    }

    fn describe(&self, row: usize) -> String {
        let side = |u: bool| if u { "upper" } else { "lower" };
        match self.rows.get(row) {
            Some(Row::Initial { dim, upper }) => format!("initial tube bound {} on {}", side(*upper), STATE_NAMES[*dim]),
            Some(Row::Input { stage, dim, upper }) => {
                format!("tightened input {} on {} at stage {stage}", side(*upper), INPUT_NAMES[*dim])
            }
            Some(Row::State { stage, dim, upper }) => {
                format!("tightened state {} on {} at stage {stage}", side(*upper), STATE_NAMES[*dim])
            }
            None => format!("row {row}"),
        }
    }

    /// Box on `x_bar_0`: the tightened state set intersected with `x_t - Z`.
    pub fn initial_box(&self, x_t: &DVector<f64>) -> BoxSet {
        let zh = half_widths(&self.tube.z);
        let lo = (x_t - &zh).sup(&self.tube.x_tight.lo);
        let hi = (x_t + &zh).inf(&self.tube.x_tight.hi);
        let empty = lo.iter().zip(hi.iter()).any(|(l, h)| l > h);
        BoxSet { lo, hi, empty }
    }

    /// Solves for the nominal plan from the measured state `x_t`.
    pub fn solve(&self, x_t: &DVector<f64>, reference: &[DVector<f64>]) -> Result<SafePlan> {
        let n = self.model.a.nrows();
        let m = self.model.b.ncols();
        if reference.len() != self.horizon + 1 {
            return Err(Error::DimensionMismatch { expected: self.horizon + 1, got: reference.len() });
        }
        if x_t.len() != n {
            return Err(Error::DimensionMismatch { expected: n, got: x_t.len() });
        }
        if let Some(bad) = reference.iter().position(|r| r.len() != n || r.iter().any(|v| !v.is_finite())) {
            return Err(Error::Config(format!("reference entry {bad} is malformed")));
        }
        let init = self.initial_box(x_t);
        if let Some((dim, lo, hi)) = init.first_empty_dim() {
            return Err(Error::Infeasible(format!(
                "initial tube bound on {} is empty ({lo} > {hi})",
                STATE_NAMES[dim]
            )));
        }
        let mut b = self.b_fixed.clone();
        for dim in 0..n {
            b[2 * dim] = init.lo[dim];
            b[2 * dim + 1] = -init.hi[dim];
        }
        let mut stacked = DVector::zeros(n * (self.horizon + 1));
        for (i, r) in reference.iter().enumerate() {
            stacked.rows_mut(i * n, n).copy_from(r);
        }
        let g = -(&self.ref_map * stacked) * 2.0;

        let sol = self.qp.solve(&g, &b).map_err(|e| match e {
            Error::Infeasible(msg) => {
                let row = msg
                    .split_whitespace()
                    .nth(2)
                    .and_then(|t| t.parse::<usize>().ok())
                    .map(|r| self.describe(r))
                    .unwrap_or_default();
                Error::Infeasible(format!("{row}: {msg}"))
            }
            other => other,
        })?;

        let z = &sol.z;
        let mut x_bar = Vec::with_capacity(self.horizon + 1);
        let mut u_bar = Vec::with_capacity(self.horizon);
        x_bar.push(z.rows(0, n).into_owned());
        let mut dynamics_residual: f64 = 0.0;
        for i in 0..self.horizon {
            let u = z.rows(n + i * m, m).into_owned();
            let next = self.model.step(&x_bar[i], &u);
            dynamics_residual = dynamics_residual.max((&self.predict[i + 1] * z - &next).amax());
            x_bar.push(next);
            u_bar.push(u);
        }
        Ok(SafePlan {
            x_bar,
            u_bar,
            kkt_residual: sol.kkt_residual,
            dynamics_residual,
            iterations: sol.iterations,
            n_active: sol.active.len(),
        })
    }

    /// The QP objective of a plan against a reference.
    pub fn objective(&self, plan: &SafePlan, reference: &[DVector<f64>]) -> f64 {
        let mut j = 0.0;
        for i in 0..self.horizon {
            let e = &plan.x_bar[i] - &reference[i];
            j += (e.transpose() * &self.cost.q * &e)[0];
            j += (plan.u_bar[i].transpose() * &self.cost.r * &plan.u_bar[i])[0];
        }
        let e = &plan.x_bar[self.horizon] - &reference[self.horizon];
        j + (e.transpose() * &self.tube.p * &e)[0]
    }
}

/// Output of one outer-loop step.
#[derive(Clone, Debug)]
pub struct ControlOutput {
    /// Input after clamping to the original input box.
    pub u: DVector<f64>,
    pub plan: SafePlan,
    /// The QP failed and the previous plan was shifted instead.
    pub fallback: bool,
    pub clamped: bool,
}

/// Receding-horizon wrapper with the fallback to the shifted previous plan.
#[derive(Clone, Debug)]
pub struct RtmpcController {
    pub qp: TrackingQp,
    previous: Option<SafePlan>,
    pub solves: usize,
    pub infeasible_steps: usize,
    pub clamp_count: usize,
}

impl RtmpcController {
    pub fn new(qp: TrackingQp) -> Self {
        Self { qp, previous: None, solves: 0, infeasible_steps: 0, clamp_count: 0 }
    }

    pub fn reset(&mut self) {
        self.previous = None;
        self.solves = 0;
        self.infeasible_steps = 0;
        self.clamp_count = 0;
    }

    pub fn plan(&mut self, x_t: &DVector<f64>, reference: &[DVector<f64>]) -> Result<(SafePlan, bool)> {
        self.solves += 1;
        match self.qp.solve(x_t, reference) {
            Ok(plan) => {
                self.previous = Some(plan.clone());
                Ok((plan, false))
            }
            Err(e @ (Error::Infeasible(_) | Error::MaxIter(_))) => {
                self.infeasible_steps += 1;
                match self.previous.take() {
                    Some(prev) => {
                        log::warn!("tracking QP failed ({e}); reusing the shifted previous plan");
                        let shifted = prev.shifted(&self.qp.model);
                        self.previous = Some(shifted.clone());
                        Ok((shifted, true))
                    }
                    None => Err(e),
                }
            }
            Err(e) => Err(e),
        }
    }

    pub fn control(&mut self, x_t: &DVector<f64>, reference: &[DVector<f64>]) -> Result<ControlOutput> {
        let (plan, fallback) = self.plan(x_t, reference)?;
        let raw = ancillary(x_t, &plan, &self.qp.tube.k);
        let u_box = &self.qp.tube.u;
        let u = raw.zip_zip_map(&u_box.lo, &u_box.hi, |v, l, h| v.clamp(l, h));
        let clamped = u != raw;
        if clamped {
            self.clamp_count += 1;
        }
        Ok(ControlOutput { u, plan, fallback, clamped })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn double_integrator() -> DiscreteLtiModel {
        let tc = 0.1;
        DiscreteLtiModel {
            a: DMatrix::from_row_slice(2, 2, &[1.0, tc, 0.0, 1.0]),
            b: DMatrix::from_row_slice(2, 1, &[tc * tc / 2.0, tc]),
            tc,
            w: BoxSet::symmetric(&[0.0, 0.01]),
        }
    }

    fn controller(x: BoxSet, u: BoxSet) -> (DiscreteLtiModel, CostParams, TubeController) {
        let model = double_integrator();
        let cost = CostParams::diagonal(&[1.0, 0.1], &[0.01]);
        let tube = TubeController::design(&model, &cost, &x, &u, &TubeConfig { n_rollouts: 50, horizon_steps: 200, ..Default::default() }).unwrap();
        (model, cost, tube)
    }

    #[test]
    fn zero_reference_at_origin() {
        let (model, cost, tube) = controller(BoxSet::symmetric(&[10.0, 10.0]), BoxSet::symmetric(&[10.0]));
        let qp = TrackingQp::new(&model, &cost, &tube, 10).unwrap();
        let zero = DVector::zeros(2);
        let plan = qp.solve(&zero, &vec![zero.clone(); 11]).unwrap();
        assert!(plan.x_bar.iter().all(|x| x.amax() < 1e-12));
        assert!(plan.u_bar.iter().all(|u| u.amax() < 1e-12));
    }

    #[test]
    fn ancillary_law() {
        let plan = SafePlan {
            x_bar: vec![DVector::from_row_slice(&[0.1, -0.2])],
            u_bar: vec![DVector::from_row_slice(&[0.5])],
            kkt_residual: 0.0,
            dynamics_residual: 0.0,
            iterations: 0,
            n_active: 0,
        };
        let k = DMatrix::from_row_slice(1, 2, &[-3.0, -1.5]);
        assert_eq!(ancillary(&plan.x_bar[0], &plan, &k), plan.u_bar[0]);
        let d = DVector::from_row_slice(&[0.01, 0.03]);
        let c1 = ancillary(&(&plan.x_bar[0] + &d), &plan, &k) - &plan.u_bar[0];
        let c2 = ancillary(&(&plan.x_bar[0] + &d * 2.0), &plan, &k) - &plan.u_bar[0];
        assert_relative_eq!(c2, c1 * 2.0, epsilon = 1e-15);
        let x = DVector::from_row_slice(&[0.4, 0.7]);
        let direct = 0.5 + (-3.0) * (0.4 - 0.1) + (-1.5) * (0.7 + 0.2);
        assert_relative_eq!(ancillary(&x, &plan, &k)[0], direct, epsilon = 1e-15);
    }

    #[test]
    fn plan_respects_tightened_sets() {
        let (model, cost, tube) = controller(BoxSet::symmetric(&[10.0, 0.5]), BoxSet::symmetric(&[1.0]));
        let qp = TrackingQp::new(&model, &cost, &tube, 20).unwrap();
        let reference = vec![DVector::from_row_slice(&[3.0, 0.0]); 21];
        let plan = qp.solve(&DVector::zeros(2), &reference).unwrap();
        assert!(plan.kkt_residual <= 1e-6);
        assert!(plan.dynamics_residual <= 1e-8);
        for x in &plan.x_bar[1..] {
            assert!(tube.x_tight.contains(x, 1e-9));
        }
        for u in &plan.u_bar {
            assert!(tube.u_tight.contains(u, 1e-9));
        }
        assert!(plan.n_active > 0);
    }

    #[test]
    fn fallback_shifts_previous_plan() {
        let (model, cost, tube) = controller(BoxSet::symmetric(&[1.0, 0.5]), BoxSet::symmetric(&[1.0]));
        let qp = TrackingQp::new(&model, &cost, &tube, 10).unwrap();
        let mut ctl = RtmpcController::new(qp);
        let reference = vec![DVector::zeros(2); 11];
        let first = ctl.control(&DVector::from_row_slice(&[0.2, 0.0]), &reference).unwrap();
        assert!(!first.fallback);
        // Far outside the state box: the initial tube bound is empty.
        let second = ctl.control(&DVector::from_row_slice(&[5.0, 0.0]), &reference).unwrap();
        assert!(second.fallback);
        assert_eq!(ctl.infeasible_steps, 1);
        assert_eq!(second.plan.x_bar[0], first.plan.x_bar[1]);
        assert_eq!(second.plan.u_bar.len(), 10);
        assert!(tube.u.contains(&second.u, 0.0));
    }

    #[test]
    fn infeasible_without_history_is_an_error() {
        let (model, cost, tube) = controller(BoxSet::symmetric(&[1.0, 0.5]), BoxSet::symmetric(&[1.0]));
        let qp = TrackingQp::new(&model, &cost, &tube, 10).unwrap();
        let r = qp.solve(&DVector::from_row_slice(&[5.0, 0.0]), &vec![DVector::zeros(2); 11]);
        match r {
            Err(Error::Infeasible(msg)) => assert!(msg.contains("px"), "{msg}"),
            other => panic!("expected infeasible, got {other:?}"),
        }
    }
}
