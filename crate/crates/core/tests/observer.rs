mod common;

use nalgebra::Vector3;
use tubefly::config::Config;

fn test_torque(cfg: &Config) -> Vector3<f64> {
    let t = 0.1 * cfg.physical().max_roll_torque(&cfg.calibration());
    Vector3::new(t, -0.5 * t, 0.0)
}

#[test]
fn observer_converges_to_a_constant_torque() {
    let cfg = Config::default();
    let steps = (30.0 / cfg.ts) as usize;
    let (settled, rel) = common::observer_settling(&cfg, &test_torque(&cfg), steps, 0.01);
    let settled = settled.unwrap_or_else(|| panic!("not settled, final relative error {rel:e}"));
    assert!(rel < 1e-3, "final relative error {rel:e}");
    // Regression value for the default covariances.
    assert!((16_000..17_000).contains(&settled), "settled after {settled} steps");
}

#[test]
fn observer_off_keeps_a_zero_estimate() {
    let mut cfg = Config::default();
    cfg.observer = false;
    let mut inner = tubefly::harness::InnerLoop::from_config(&cfg, false).unwrap();
    let state = tubefly::sim::RigidBodyState::at_rest(Vector3::zeros());
    for _ in 0..100 {
        inner.step(&state, &nalgebra::DVector::zeros(3)).unwrap();
    }
    assert_eq!(inner.estimate.torque, Vector3::zeros());
}
