use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rccm_core::dynamics::{quadrotor_model, QuadrotorParams, SystemModel};
use rccm_core::geodesic::{
    energy_lower_bound, first_variation_terms, GeodesicSolver, GeodesicSolverConfig,
};
use rccm_core::metric::{quadrotor_metric, MetricPolynomial};

mod common;
use common::polyline_energy;

fn quad_model() -> SystemModel {
    quadrotor_model(QuadrotorParams::default()).unwrap()
}

fn random_pair(model: &SystemModel, rng: &mut ChaCha8Rng, scale: f64) -> (DVector<f64>, DVector<f64>) {
    let shrunk = model.x_box.clone();
    let a = shrunk.sample(rng);
    let mut b = a.clone();
    for i in 0..a.len() {
        let w = model.x_box.bounds[i].width();
        b[i] += scale * w * rng.gen_range(-0.5..0.5);
    }
    (a, model.x_box.clamp(&b))
}

#[test]
fn constant_metric_energy_is_quadratic_form() {
    let solver = GeodesicSolver::new(GeodesicSolverConfig::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut w0 = DMatrix::<f64>::from_fn(6, 6, |_, _| rng.gen_range(-1.0..1.0));
    w0 = &w0 * w0.transpose() + DMatrix::identity(6, 6);
    let metric = MetricPolynomial::constant(w0, 1.0).unwrap();
    let m = metric.eval_m(&DVector::zeros(6)).unwrap();
    for _ in 0..500 {
        let a = DVector::<f64>::from_fn(6, |_, _| rng.gen_range(-5.0..5.0));
        let b = DVector::<f64>::from_fn(6, |_, _| rng.gen_range(-5.0..5.0));
        let c = solver.solve(&metric, &a, &b, None).unwrap();
        let d = &b - &a;
        let exact = d.dot(&(&m * &d));
        assert!((c.energy - exact).abs() <= 1e-8 * (1.0 + exact), "{} vs {}", c.energy, exact);
        let (t1, t0) = first_variation_terms(&c, &metric, &a, &b).unwrap();
        assert!((t1 - &m * &d).amax() < 1e-8 * (1.0 + d.amax()));
        assert!((t0 - &m * &d).amax() < 1e-8 * (1.0 + d.amax()));
    }
}

#[test]
fn quadrotor_energy_below_straight_line_and_polyline() {
    let model = quad_model();
    let metric = quadrotor_metric();
    let solver = GeodesicSolver::new(GeodesicSolverConfig::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for i in 0..20 {
        let (a, b) = random_pair(&model, &mut rng, if i < 10 { 0.02 } else { 0.05 });
        let c = solver.solve(&metric, &a, &b, None).unwrap();
        assert!(c.converged, "pair {i} not converged");
        let straight = solver.energy(&metric, &a, &b, &solver.straight_line(&a, &b)).unwrap();
        assert!(c.energy <= straight + 1e-12);
        let oracle = polyline_energy(&metric, &a, &b, 200);
        assert!(c.energy <= oracle + 1e-4, "pair {i}: {} vs oracle {}", c.energy, oracle);
    }
}

#[test]
fn gradient_matches_finite_differences() {
    let model = quad_model();
    let metric = quadrotor_metric();
    let solver = GeodesicSolver::new(GeodesicSolverConfig::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..5 {
        let (a, b) = random_pair(&model, &mut rng, 0.5);
        let mut free = solver.straight_line(&a, &b);
        for v in free.iter_mut() {
            *v += 0.05 * rng.gen_range(-1.0..1.0);
        }
        let (_, g) = solver.energy_and_gradient(&metric, &a, &b, &free).unwrap();
        for idx in 0..free.len() {
            let h = 1e-6;
            let mut fp = free.clone();
            let mut fm = free.clone();
            fp[idx] += h;
            fm[idx] -= h;
            let fd = (solver.energy(&metric, &a, &b, &fp).unwrap() - solver.energy(&metric, &a, &b, &fm).unwrap())
                / (2.0 * h);
            let err = (fd - g[idx]).abs() / g.amax();
            assert!(err < 1e-5, "entry {idx}: fd {fd} vs {}", g[idx]);
        }
    }
}

#[test]
fn energy_symmetry_and_quadrature_refinement() {
    let model = quad_model();
    let metric = quadrotor_metric();
    let solver = GeodesicSolver::new(GeodesicSolverConfig::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for _ in 0..20 {
        let (a, b) = random_pair(&model, &mut rng, 0.05);
        let ab = solver.solve(&metric, &a, &b, None).unwrap();
        let ba = solver.solve(&metric, &b, &a, None).unwrap();
        assert!((ab.energy - ba.energy).abs() <= 1e-8 * (1.0 + ab.energy));
        let refined = ab.energy_with_quadrature(&metric, 16).unwrap();
        assert!((refined - ab.energy).abs() < 1e-6, "{} vs {}", refined, ab.energy);
    }
}

#[test]
fn warm_start_does_not_cost_more_than_cold() {
    let metric = quadrotor_metric();
    let solver = GeodesicSolver::new(GeodesicSolverConfig::default()).unwrap();
    let mut xs = DVector::from_vec(vec![2.0, 1.0, 0.1, 0.5, 0.2, 0.0]);
    let mut x = DVector::from_vec(vec![2.3, 0.8, -0.2, 0.9, 0.0, 0.3]);
    let mut prev = solver.solve(&metric, &xs, &x, None).unwrap();
    for k in 0..200 {
        let t = k as f64 * 5e-4;
        xs[0] += 5e-4 * 0.5;
        xs[3] = 0.5 + 0.1 * t.sin();
        x[2] = -0.2 + 0.05 * t;
        x[0] += 5e-4 * 0.9;
        let warm = solver.solve(&metric, &xs, &x, Some(&prev)).unwrap();
        let cold = solver.solve(&metric, &xs, &x, None).unwrap();
        assert!(warm.iterations <= cold.iterations);
        assert!((warm.energy - cold.energy).abs() < 1e-8 * (1.0 + cold.energy));
        prev = warm;
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]
    #[test]
    fn energy_respects_lower_bound(seed in any::<u64>()) {
        let model = quad_model();
        let metric = quadrotor_metric();
        let solver = GeodesicSolver::new(GeodesicSolverConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (a, b) = random_pair(&model, &mut rng, 0.3);
        let c = solver.solve(&metric, &a, &b, None).unwrap();
        prop_assert!(c.energy >= 0.0);
        prop_assert!(c.energy >= energy_lower_bound(&metric, &a, &b) * (1.0 - 1e-9));
    }
}
