use nalgebra::DVector;
use rccm_core::dynamics::{quadrotor_model, rk4_step, true_derivative, DisturbanceField, QuadrotorParams};
use rccm_core::estimator::{compute_eeb, compute_phi, EebParams, EstimatorState};
use rccm_core::planner::paper_tasks;
use rccm_core::sim::{eeb_params, run_scenario, DeltaSource, EstimatorConfig, Scenario, ScenarioConfig};

fn paper_eeb() -> EebParams {
    let model = quadrotor_model(QuadrotorParams::default()).unwrap();
    let x = DVector::zeros(6);
    eeb_params(&model, &EstimatorConfig::default(), &x)
}

#[test]
fn phi_on_nine_point_grid() {
    let model = quadrotor_model(QuadrotorParams::default()).unwrap();
    let coarse = compute_phi(&model, 3.54, 5).unwrap();
    let fine = compute_phi(&model, 3.54, 9).unwrap();
    assert!((fine.phi - 783.96).abs() <= 0.02 * 783.96, "phi = {}", fine.phi);
    // the 5-point grid nodes are a subset of the 9-point nodes
    assert!(fine.phi >= coarse.phi);
    assert_eq!(fine.points_evaluated, 9u64.pow(8));
}

#[test]
fn sampling_period_for_the_target_bound() {
    let p = paper_eeb();
    assert_eq!(p.lipschitz_b, 0.0);
    assert_eq!(p.n, 6);
    let t = p.period_for_bound(0.1);
    assert!((t - 2.04e-7).abs() <= 0.05 * 2.04e-7, "T = {t:e}");
    assert!((p.alpha(t) * p.max_b_pinv - 0.1).abs() < 1e-9);
}

#[test]
fn bound_shrinks_with_the_period() {
    let p = paper_eeb();
    let mut t = 0.004;
    while t > 1e-7 {
        assert!(p.alpha(t / 2.0) < p.alpha(t));
        t /= 2.0;
    }
    let mut q = p;
    q.period = 0.002;
    assert_eq!(compute_eeb(&q, 0.001), 3.54);
    assert_eq!(compute_eeb(&q, 0.002), q.alpha(0.002) * q.max_b_pinv);
}

/// Runs the plant under constant `u` and a constant disturbance and returns
/// the largest `|d_check - e^{-aT} d|` from the second sample on.
fn constant_disturbance_error(u_offset: f64) -> f64 {
    let params = QuadrotorParams::default();
    let model = quadrotor_model(params).unwrap();
    let d = DisturbanceField::constant(vec![0.3, 0.3]);
    let (a, period, dt) = (10.0, 0.002, 5e-4);
    let mut x = DVector::from_vec(vec![5.0, 5.0, 0.0, 0.0, 0.0, 0.0]);
    let hover = params.hover_thrust_per_rotor();
    let u = DVector::from_element(2, hover - 0.3 + u_offset);
    let mut est = EstimatorState::new(&model, &x, a, period).unwrap();
    let expected = d.eval(&x) * (-a * period).exp();
    let mut worst = 0.0f64;
    for k in 1..=400 {
        est.predictor_step(&model, &x, &u, dt).unwrap();
        x = rk4_step(&mut |_, y| true_derivative(&model, &d, y, &u).unwrap(), 0.0, &x, dt);
        if k % 4 == 0 {
            est.sample_update(&model, &x, k as f64 * dt).unwrap();
            if k >= 8 {
                worst = worst.max((&est.d_check - &expected).norm());
            }
        }
    }
    worst
}

#[test]
fn constant_disturbance_is_recovered_up_to_the_decay_factor() {
    // plant at rest: the held measurement is exact
    assert!(constant_disturbance_error(0.0) < 1e-10);
    // accelerating plant: holding x over a step costs O(a dt) relative error
    assert!(constant_disturbance_error(0.3) < 0.01 * 0.3);
}

/// Largest estimation error over `t in [0.1, 1]` on task 1 for each period.
fn settled_errors(periods: &[f64]) -> Vec<f64> {
    let mut cfg = ScenarioConfig::new("t-scaling", paper_tasks().remove(0));
    cfg.horizon = Some(1.0);
    cfg.dt = 2.5e-4;
    cfg.controller.delta_source = DeltaSource::Fixed;
    cfg.controller.delta = Some(0.0745);
    let first = Scenario::resolve(&cfg).unwrap();
    periods
        .iter()
        .map(|&p| {
            let mut c = cfg.clone();
            c.estimator.period = p;
            let sc = Scenario::resolve_with(&c, None, Some(first.plan.clone())).unwrap();
            run_scenario(&sc).unwrap().summary.max_estimation_error_settled
        })
        .collect()
}

#[test]
fn halving_the_period_roughly_halves_the_error() {
    let e = settled_errors(&[0.004, 0.002, 0.001]);
    for w in e.windows(2) {
        let r = w[1] / w[0];
        assert!((0.35..=0.65).contains(&r), "errors {e:?}");
    }
    assert!(e[1] <= 0.1);
}
