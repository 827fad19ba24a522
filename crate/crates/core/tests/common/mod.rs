//! Independent oracles shared by the integration tests and the acceptance
//! harness.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tubefly::config::Config;
use tubefly::harness::{collect_demonstration, ControllerStack, InnerLoop, TrajectoryTask};
use tubefly::imitation::augment;
use tubefly::linmodel::{BoxSet, DiscreteLtiModel};
use tubefly::mlp::{train, MlpPolicy, TrainReport};
use tubefly::rtmpc::{lqr_design, CostParams, TrackingQp, TubeController};
use tubefly::sim::{step_dynamics, RigidBodyState};

/// Minimiser of `z'Hz/2 + g'z` subject to `E z = f`, from the full KKT
/// system. `None` when the system is singular.
pub fn dense_kkt(h: &DMatrix<f64>, g: &DVector<f64>, e: &DMatrix<f64>, f: &DVector<f64>) -> Option<DVector<f64>> {
    let n = h.nrows();
    let m = e.nrows();
    let mut k = DMatrix::zeros(n + m, n + m);
    k.view_mut((0, 0), (n, n)).copy_from(h);
    if m > 0 {
        k.view_mut((n, 0), (m, n)).copy_from(e);
        k.view_mut((0, n), (n, m)).copy_from(&e.transpose());
    }
    let mut rhs = DVector::zeros(n + m);
    rhs.rows_mut(0, n).copy_from(&(-g));
    if m > 0 {
        rhs.rows_mut(n, m).copy_from(f);
    }
    let sol = k.lu().solve(&rhs)?;
    let z = sol.rows(0, n).into_owned();
    z.iter().all(|v| v.is_finite()).then_some(z)
}

/// A small tracking problem on a double integrator: position unbounded,
/// velocity and input boxed, horizon 3.
pub struct SmallMpc {
    pub model: DiscreteLtiModel,
    pub cost: CostParams,
    pub tube: TubeController,
    pub qp: TrackingQp,
    pub x_t: DVector<f64>,
    pub reference: Vec<DVector<f64>>,
}

pub const SMALL_HORIZON: usize = 3;

pub fn small_mpc(seed: u64) -> SmallMpc {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dt = 0.1;
    let a = DMatrix::from_row_slice(2, 2, &[1.0, dt, 0.0, 1.0]);
    let b = DMatrix::from_row_slice(2, 1, &[dt * dt / 2.0, dt]);
    let model = DiscreteLtiModel { a, b, tc: dt, w: BoxSet::symmetric(&[1e-4, 1e-3]) };
    let cost = CostParams::diagonal(&[rng.random_range(0.5..2.0), rng.random_range(0.01..0.5)], &[rng.random_range(0.01..0.5)]);
    let v_max = rng.random_range(0.3..0.6);
    let u_max = rng.random_range(0.5..1.5);
    let x = BoxSet::symmetric(&[f64::INFINITY, v_max]);
    let u = BoxSet::symmetric(&[u_max]);
    let lqr = lqr_design(&model.a, &model.b, &cost.q, &cost.r).unwrap();
    let tube = TubeController::from_parts(&lqr, BoxSet::symmetric(&[0.01, 0.02]), x, u).unwrap();
    let qp = TrackingQp::new(&model, &cost, &tube, SMALL_HORIZON).unwrap();
    let x_t = DVector::from_vec(vec![rng.random_range(-1.0..1.0), rng.random_range(-0.9..0.9) * v_max]);
    let reference = (0..=SMALL_HORIZON)
        .map(|_| DVector::from_vec(vec![rng.random_range(-2.0..2.0), rng.random_range(-1.0..1.0)]))
        .collect();
    SmallMpc { model, cost, tube, qp, x_t, reference }
}

/// Optimum of the same tracking problem in the full (uncondensed) space,
/// found by solving the equality-constrained problem for every assignment
/// of each finite bound pair to {inactive, lower, upper} and keeping the
/// best primal-feasible candidate.
pub fn enumerate_small_mpc(p: &SmallMpc) -> Option<(Vec<DVector<f64>>, Vec<DVector<f64>>)> {
    let n = 2;
    let m = 1;
    let hz = SMALL_HORIZON;
    let nv = n * (hz + 1) + m * hz;
    let xi = |i: usize, d: usize| i * n + d;
    let ui = |i: usize| n * (hz + 1) + i * m;

    let mut h = DMatrix::zeros(nv, nv);
    let mut g = DVector::zeros(nv);
    for i in 0..=hz {
        let w = if i < hz { &p.cost.q } else { &p.tube.p };
        for r in 0..n {
            for c in 0..n {
                h[(xi(i, r), xi(i, c))] += 2.0 * w[(r, c)];
                g[xi(i, r)] -= 2.0 * w[(r, c)] * p.reference[i][c];
            }
        }
    }
    for i in 0..hz {
        h[(ui(i), ui(i))] += 2.0 * p.cost.r[(0, 0)];
    }
    let mut eq = DMatrix::zeros(n * hz, nv);
    for i in 0..hz {
        for r in 0..n {
            eq[(i * n + r, xi(i + 1, r))] = 1.0;
            for c in 0..n {
                eq[(i * n + r, xi(i, c))] = -p.model.a[(r, c)];
            }
            eq[(i * n + r, ui(i))] = -p.model.b[(r, 0)];
        }
    }

    let zh = p.tube.z.hi.clone();
    let mut bounds: Vec<(usize, f64, f64)> = Vec::new();
    for d in 0..n {
        let lo = (p.x_t[d] - zh[d]).max(p.tube.x_tight.lo[d]);
        let hi = (p.x_t[d] + zh[d]).min(p.tube.x_tight.hi[d]);
        bounds.push((xi(0, d), lo, hi));
    }
    for i in 1..=hz {
        for d in 0..n {
            let (lo, hi) = (p.tube.x_tight.lo[d], p.tube.x_tight.hi[d]);
            if lo.is_finite() || hi.is_finite() {
                bounds.push((xi(i, d), lo, hi));
            }
        }
    }
    for i in 0..hz {
        bounds.push((ui(i), p.tube.u_tight.lo[0], p.tube.u_tight.hi[0]));
    }

    let mut best: Option<(f64, DVector<f64>)> = None;
    let total = 3usize.pow(bounds.len() as u32);
    for code in 0..total {
        let mut c = code;
        let mut rows: Vec<(usize, f64)> = Vec::new();
        for &(var, lo, hi) in &bounds {
            match c % 3 {
                1 => rows.push((var, lo)),
                2 => rows.push((var, hi)),
                _ => {}
            }
            c /= 3;
        }
        let mut e = DMatrix::zeros(eq.nrows() + rows.len(), nv);
        e.view_mut((0, 0), (eq.nrows(), nv)).copy_from(&eq);
        let mut f = DVector::zeros(e.nrows());
        for (k, &(var, val)) in rows.iter().enumerate() {
            e[(eq.nrows() + k, var)] = 1.0;
            f[eq.nrows() + k] = val;
        }
        let Some(z) = dense_kkt(&h, &g, &e, &f) else { continue };
        if (&e * &z - &f).amax() > 1e-9 {
            continue;
        }
        if bounds.iter().any(|&(var, lo, hi)| z[var] < lo - 1e-9 || z[var] > hi + 1e-9) {
            continue;
        }
        let obj = 0.5 * (z.transpose() * &h * &z)[0] + g.dot(&z);
        if best.as_ref().is_none_or(|(b, _)| obj < *b) {
            best = Some((obj, z));
        }
    }
    let (_, z) = best?;
    let x_bar = (0..=hz).map(|i| z.rows(xi(i, 0), n).into_owned()).collect();
    let u_bar = (0..hz).map(|i| z.rows(ui(i), m).into_owned()).collect();
    Some((x_bar, u_bar))
}

/// Flies the linear model under the ancillary law around one nominal plan
/// for `steps` steps with iid disturbances drawn uniformly from `W`. The
/// plan is solved once from hover toward the ramp reference; past the
/// horizon its last input is held. The true state starts on the nominal
/// one. Returns the first step whose deviation leaves `Z`, if any.
pub fn containment_run(stack: &ControllerStack, task: &TrajectoryTask, steps: usize, seed: u64) -> Option<usize> {
    let model = &stack.model;
    let n = model.a.nrows();
    let window = task.reference_window(0, model.tc, stack.cfg.horizon);
    let plan = stack.qp.solve(&DVector::zeros(n), &window).expect("hover plan is feasible");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x_bar = plan.x_bar[0].clone();
    let mut x = x_bar.clone();
    for k in 0..steps {
        let u_bar = &plan.u_bar[k.min(plan.u_bar.len() - 1)];
        let u = u_bar + &stack.tube.k * (&x - &x_bar);
        let w = DVector::from_fn(n, |i, _| {
            let (lo, hi) = (model.w.lo[i], model.w.hi[i]);
            if hi > lo {
                rng.random_range(lo..=hi)
            } else {
                lo
            }
        });
        x = model.step(&x, &u) + w;
        x_bar = model.step(&x_bar, u_bar);
        if !stack.tube.z.contains(&(&x - &x_bar), 1e-12) {
            return Some(k + 1);
        }
    }
    None
}

/// Demonstration length used for a task: the configured length, or
/// the whole task when it is longer.
pub fn demo_length(stack: &ControllerStack, task: &TrajectoryTask) -> usize {
    stack.cfg.demo_steps.max(task.outer_steps(stack.cfg.tc))
}

/// Collect, augment and train with the stack's configuration.
pub fn train_task_policy(stack: &ControllerStack, task: &TrajectoryTask) -> (MlpPolicy, TrainReport) {
    let cfg = &stack.cfg;
    let demo = collect_demonstration(stack, task, demo_length(stack, task)).expect("demonstration");
    let ds = augment(&demo, &stack.tube.z, &stack.tube.k, cfg.n_extra, cfg.aug_seed).expect("augmentation");
    train(&ds, &cfg.policy_sizes(), &cfg.train_config()).expect("training")
}

/// Hovers the inner loop with the observer on under a constant body torque
/// and noiseless rate measurements. Returns the first step after which the
/// estimate stays within `tol` (relative, max norm) of the true torque, and
/// the final relative error.
pub fn observer_settling(cfg: &Config, tau_ext: &Vector3<f64>, steps: usize, tol: f64) -> (Option<usize>, f64) {
    let mut inner = InnerLoop::from_config(cfg, true).expect("observer design");
    let mut state = RigidBodyState::at_rest(Vector3::zeros());
    let hold = DVector::zeros(3);
    let scale = tau_ext.amax();
    let mut last_outside = None;
    let mut rel = f64::INFINITY;
    for k in 0..steps {
        let out = inner.step(&state, &hold).expect("inner step");
        state = step_dynamics(&state, &out.wrench, &Vector3::zeros(), tau_ext, &inner.params, cfg.ts).expect("plant step");
        rel = (inner.estimate.torque - tau_ext).amax() / scale;
        if rel > tol {
            last_outside = Some(k);
        }
    }
    let settled = match last_outside {
        None => Some(0),
        Some(k) if k + 1 < steps => Some(k + 1),
        Some(_) => None,
    };
    (settled, rel)
}
