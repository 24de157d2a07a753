use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rccm_core::dynamics::{
    integrate_rk4, learned_derivative, paper_disturbance, pseudo_inverse, quadrotor_model, true_derivative,
    NoLearning, QuadrotorParams, SystemModel, UncertaintyModel,
};

fn model() -> SystemModel {
    quadrotor_model(QuadrotorParams::default()).unwrap()
}

/// Affine stand-in for a learned model.
struct Affine {
    a: DMatrix<f64>,
    c: DVector<f64>,
}

impl UncertaintyModel for Affine {
    fn output_dim(&self) -> usize {
        self.c.len()
    }

    fn predict(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.a * x + &self.c
    }
}

fn state_in_box() -> impl Strategy<Value = Vec<f64>> {
    let b = model().x_box.bounds;
    b.into_iter().map(|i| i.lo..=i.hi).collect::<Vec<_>>()
}

fn input_in_box() -> impl Strategy<Value = Vec<f64>> {
    let b = model().u_box.bounds;
    b.into_iter().map(|i| i.lo..=i.hi).collect::<Vec<_>>()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn matched_structure_identity(
        x in state_in_box(),
        u in input_in_box(),
        a in proptest::collection::vec(-1.0f64..1.0, 12),
        c in proptest::collection::vec(-2.0f64..2.0, 2),
    ) {
        let m = model();
        let d = paper_disturbance();
        let x = DVector::from_vec(x);
        let u = DVector::from_vec(u);
        let dhat = Affine { a: DMatrix::from_row_slice(2, 6, &a), c: DVector::from_vec(c) };
        let diff = true_derivative(&m, &d, &x, &u).unwrap() - learned_derivative(&m, &dhat, &x, &u).unwrap();
        let expected = m.input_matrix(&x) * (d.eval(&x) - dhat.predict(&x));
        prop_assert!((diff - &expected).amax() <= 1e-12 * (1.0 + expected.amax()));
    }

    #[test]
    fn no_learning_is_nominal(x in state_in_box(), u in input_in_box()) {
        let m = model();
        let x = DVector::from_vec(x);
        let u = DVector::from_vec(u);
        let fl = learned_derivative(&m, &NoLearning { input_dim: 2 }, &x, &u).unwrap();
        prop_assert_eq!(fl, m.nominal_derivative(&x, &u).unwrap());
    }

    #[test]
    fn wind_stays_within_declared_bound(x in state_in_box()) {
        let d = paper_disturbance().eval(&DVector::from_vec(x));
        prop_assert!(d.norm() <= 3.54);
        prop_assert!(d[0] >= 0.0 && d[0] == d[1]);
    }
}

/// Smooth, state-dependent thrust around hover so every term is exercised.
fn forced_quadrotor(m: &SystemModel, t: f64, x: &DVector<f64>) -> DVector<f64> {
    let hover = QuadrotorParams::default().hover_thrust_per_rotor();
    let u = DVector::from_vec(vec![
        hover + 0.4 * (2.0 * t).sin() - 0.3 * x[2],
        hover - 0.2 * (3.0 * t).cos() + 0.3 * x[2],
    ]);
    true_derivative(m, &paper_disturbance(), x, &u).unwrap()
}

#[test]
fn rk4_is_fourth_order_on_the_quadrotor() {
    let m = model();
    let x0 = DVector::from_vec(vec![1.0, 2.0, 0.2, 1.5, -0.5, 0.3]);
    let end = |dt: f64| integrate_rk4(|t, x| forced_quadrotor(&m, t, x), &x0, 1.0, dt).unwrap().pop().unwrap();
    let h = 0.02;
    let reference = end(h / 16.0);
    let e1 = (end(h) - &reference).norm();
    let e2 = (end(h / 2.0) - &reference).norm();
    let order = (e1 / e2).log2();
    assert!(order >= 3.9, "observed order {order} (errors {e1:e} {e2:e})");
}

#[test]
fn integration_is_deterministic() {
    let m = model();
    let x0 = DVector::from_vec(vec![3.0, 4.0, -0.1, 0.5, 0.2, 0.0]);
    let a = integrate_rk4(|t, x| forced_quadrotor(&m, t, x), &x0, 0.5, 1e-3).unwrap();
    let b = integrate_rk4(|t, x| forced_quadrotor(&m, t, x), &x0, 0.5, 1e-3).unwrap();
    assert_eq!(a.len(), 501);
    assert!(a.iter().zip(&b).all(|(p, q)| p.iter().zip(q).all(|(u, v)| u.to_bits() == v.to_bits())));
}

#[test]
fn input_matrix_structure() {
    let p = QuadrotorParams::default();
    let m = model();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = m.x_box.sample(&mut rng);
    let b = m.input_matrix(&x);
    assert!(m.input_matrix_is_constant());
    for r in 0..4 {
        assert_eq!(b.row(r).amax(), 0.0);
    }
    assert_eq!(b[(4, 0)], 1.0 / p.mass);
    assert_eq!(b[(4, 1)], 1.0 / p.mass);
    assert!((b[(5, 0)] - p.arm / p.inertia).abs() < 1e-12);
    assert!((b[(5, 1)] + p.arm / p.inertia).abs() < 1e-12);
    let eye = pseudo_inverse(&b) * &b;
    assert!((eye - DMatrix::identity(2, 2)).amax() < 1e-12);
    assert_eq!(m.lipschitz_b, 0.0);
    assert_eq!(m.lipschitz_d, 4.0);
    assert_eq!(m.bound_d, 3.54);
}

#[test]
fn disturbance_audit_on_ten_thousand_pairs() {
    let m = model();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let audit = paper_disturbance().audit(&m.x_box, 10_000, &mut rng);
    assert!(audit.bound_ok && audit.max_norm <= 3.54, "{audit:?}");
    assert!(audit.lipschitz_ok && audit.max_ratio <= 4.0, "{audit:?}");
}
