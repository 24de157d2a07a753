use nalgebra::DVector;
use rccm_core::controller::check_feasible_plan;
use rccm_core::dynamics::{paper_disturbance, quadrotor_model, NoLearning, QuadrotorParams, UncertaintyModel};
use rccm_core::planner::{evaluate_cost, paper_tasks, plan_flat, PlannedTrajectory, PlannerConfig, PLAN_FORMAT};

#[test]
fn constant_input_costs() {
    let t: Vec<f64> = (0..=200).map(|k| k as f64 * 0.01).collect();
    assert!((evaluate_cost(&t, &vec![DVector::zeros(2); t.len()]) - 10.0).abs() < 1e-12);
    let t: Vec<f64> = (0..=100).map(|k| k as f64 * 0.01).collect();
    assert!((evaluate_cost(&t, &vec![DVector::from_element(2, 1.0); t.len()]) - 7.0).abs() < 1e-12);
}

#[test]
fn paper_tasks_plan_cleanly() {
    let params = QuadrotorParams::default();
    let model = quadrotor_model(params).unwrap();
    let cfg = PlannerConfig::default();
    let none = NoLearning { input_dim: 2 };
    let truth = paper_disturbance();
    for task in paper_tasks() {
        for dhat in [&none as &dyn UncertaintyModel, &truth] {
            let p = plan_flat(&params, &model, &task, dhat, &cfg).unwrap();
            assert!(p.dynamics_residual(&model, dhat) <= 1e-3, "{}", task.name);
            assert!(p.clearance(&task.obstacles) >= 0.1 - 1e-12, "{}", task.name);
            assert!((p.t_grid[1] - p.t_grid[0] - cfg.output_dt).abs() < 1e-12);
            assert!((p.cost - evaluate_cost(&p.t_grid, &p.u_star)).abs() < 1e-9 * p.cost);
            let bound = model.u_box.bounds[0].hi;
            assert!(p.u_star.iter().all(|u| u.iter().all(|v| *v >= 0.0 && *v <= bound)));
            let (x0, _, _) = p.sample(0.0);
            assert!((x0[0] - task.start[0]).abs() < 1e-9 && (x0[1] - task.start[1]).abs() < 1e-9);
            let (xe, _, _) = p.sample(p.arrival_time);
            assert!((xe[0] - task.goal[0]).abs() < 1e-9 && (xe[1] - task.goal[1]).abs() < 1e-9);
        }
    }
}

#[test]
fn obstacles_only_raise_the_cost() {
    let params = QuadrotorParams::default();
    let model = quadrotor_model(params).unwrap();
    let cfg = PlannerConfig::default();
    let none = NoLearning { input_dim: 2 };
    let task = paper_tasks().remove(2);
    let mut free = task.clone();
    free.obstacles.clear();
    let with = plan_flat(&params, &model, &task, &none, &cfg).unwrap();
    let without = plan_flat(&params, &model, &free, &none, &cfg).unwrap();
    assert!(without.cost <= with.cost);
    // hover energy over the arrival time bounds the cost from below
    let hover = params.hover_thrust_per_rotor();
    assert!(without.cost >= 2.0 * hover * hover * without.arrival_time);
}

#[test]
fn plan_file_roundtrip_and_feasibility_report() {
    let params = QuadrotorParams::default();
    let model = quadrotor_model(params).unwrap();
    let none = NoLearning { input_dim: 2 };
    let task = paper_tasks().remove(2);
    let p = plan_flat(&params, &model, &task, &none, &PlannerConfig::default()).unwrap();
    let mut buf = Vec::new();
    p.write_to(&mut buf).unwrap();
    assert!(String::from_utf8_lossy(&buf).starts_with(&format!("# {PLAN_FORMAT}\n")));
    let back = PlannedTrajectory::read_from(buf.as_slice()).unwrap();
    assert_eq!(back, p);

    let report = check_feasible_plan(&model, &none, &p.t_grid, &p.x_star, &p.u_star, None);
    assert_eq!(report.samples, p.len());
    assert!(report.state_margin >= 0.0, "{report:?}");
    // hover thrust sits below the input box shrunk by b_d = 3.54
    assert!(report.input_margin < 0.0);
    assert!((report.shrunk_set_margin - (0.5 * model.u_box.bounds[0].width() - 3.54)).abs() < 1e-12);
}
