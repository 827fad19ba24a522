use std::sync::OnceLock;

use tubefly::config::Config;
use tubefly::harness::{collect_demonstration, run_closed_loop, ControllerStack, RunOptions, TrajectoryTask};
use tubefly::sim::DisturbanceProfile;

fn stack() -> &'static ControllerStack {
    static STACK: OnceLock<ControllerStack> = OnceLock::new();
    STACK.get_or_init(|| ControllerStack::build(&Config::default()).unwrap())
}

fn task(name: &str) -> TrajectoryTask {
    TrajectoryTask::from_name(name).unwrap()
}

#[test]
fn rtmpc_holds_hover() {
    let s = stack();
    let mut ctrl = s.rtmpc();
    let res = run_closed_loop(s, &mut ctrl, &task("hover"), &RunOptions::new(true, DisturbanceProfile::none())).unwrap();
    for (i, v) in res.metrics.rmse.iter().enumerate() {
        assert!(*v <= 1e-4, "axis {i}: {v}");
    }
    assert_eq!(res.metrics.infeasible_steps, 0);
}

#[test]
fn runs_are_deterministic() {
    let s = stack();
    let t = task("t2");
    let opts = RunOptions { log: true, ..RunOptions::new(true, t.disturbance(&s.cfg, 3)) };
    let a = run_closed_loop(s, &mut s.rtmpc(), &t, &opts).unwrap();
    let b = run_closed_loop(s, &mut s.rtmpc(), &t, &opts).unwrap();
    assert_eq!(a.metrics, b.metrics);
    assert_eq!(a.log.unwrap().rows, b.log.unwrap().rows);
}

#[test]
fn reference_tasks_stay_feasible_and_bounded() {
    let s = stack();
    for name in ["t1", "t2", "t3"] {
        let t = task(name);
        for seed in 0..2 {
            let res = run_closed_loop(s, &mut s.rtmpc(), &t, &RunOptions::new(true, t.disturbance(&s.cfg, seed))).unwrap();
            assert_eq!(res.metrics.infeasible_steps, 0, "{name} seed {seed}");
            assert!(res.metrics.max_mae() < 0.02, "{name} seed {seed}: {:?}", res.metrics.mae);
            assert!(res.final_state.is_finite());
        }
    }
}

#[test]
fn disturbance_pulses_are_logged_and_rejected() {
    let s = stack();
    let t = task("t2");
    let dist = t.disturbance(&s.cfg, 7);
    assert_eq!(dist.pulses.len(), 3);
    let opts = RunOptions { log: true, ..RunOptions::new(true, dist.clone()) };
    let res = run_closed_loop(s, &mut s.rtmpc(), &t, &opts).unwrap();
    let log = res.log.unwrap();
    assert_eq!(log.disturbance_fingerprint, dist.fingerprint());
    let active = log.rows.iter().filter(|r| r.f_ext.norm() > 0.0).count();
    let expected = 3.0 * s.cfg.pulse_duration / s.cfg.ts;
    assert!((active as f64 - expected).abs() <= 3.0, "{active} vs {expected}");
    let last = log.rows.last().unwrap();
    assert!((last.state.position - last.p_des).norm() < 5e-3);
}

#[test]
fn commanded_inputs_respect_the_input_box() {
    let s = stack();
    let demo = collect_demonstration(s, &task("t3"), 100).unwrap();
    for step in &demo.steps {
        assert!(s.tube.u.contains(&step.u, 1e-9), "t={}: {:?}", step.t, step.u);
        assert!(s.tube.u_tight.contains(&step.u_bar, 1e-9));
    }
}

#[test]
fn one_step_model_residuals_fit_in_the_tube() {
    // Along a demonstration, the position part of x+ - (A x + B u) is the
    // model mismatch the ancillary law has to absorb.
    let s = stack();
    let demo = collect_demonstration(s, &task("t3"), 200).unwrap();
    let zh = &s.tube.z.hi;
    let mut worst = [0.0f64; 3];
    for w in demo.steps.windows(2) {
        let r = &w[1].x - s.model.step(&w[0].x, &w[0].u);
        for i in 0..3 {
            worst[i] = worst[i].max(r[i].abs() / zh[i]);
        }
    }
    assert!(worst.iter().all(|v| *v <= 1.0), "residual / tube: {worst:?}");
}
