//! Control-affine plant models, matched disturbances and fixed-step integration.
//!
//! The plant is `x' = f(x) + B(x) (u + d(x))` where `d` enters through the
//! input channels. A learned estimate `d_hat` gives the learned dynamics
//! `F_l(x, u) = f(x) + B(x) d_hat(x) + B(x) u`.

use std::f64::consts::FRAC_PI_3;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DynamicsError {
    #[error("dimension mismatch: expected {expected}, got {got} ({what})")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("integration diverged after t = {last_valid_time}")]
    Diverged { last_valid_time: f64 },
    #[error("invalid step: dt = {dt}, t_span = {t_span}")]
    InvalidStep { dt: f64, t_span: f64 },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

pub(crate) fn check_dim(what: &'static str, expected: usize, got: usize) -> Result<(), DynamicsError> {
    if expected == got {
        Ok(())
    } else {
        Err(DynamicsError::Dimension { what, expected, got })
    }
}

/// Closed interval `[lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    pub fn contains(&self, v: f64) -> bool {
        v >= self.lo && v <= self.hi
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    /// `count` evenly spaced points including both ends (midpoint when `count == 1`).
    pub fn linspace(&self, count: usize) -> Vec<f64> {
        match count {
            0 => Vec::new(),
            1 => vec![0.5 * (self.lo + self.hi)],
            _ => (0..count)
                .map(|i| self.lo + self.width() * i as f64 / (count - 1) as f64)
                .collect(),
        }
    }
}

/// Axis-aligned box, one interval per coordinate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxSet {
    pub bounds: Vec<Interval>,
}

impl BoxSet {
    pub fn new(bounds: Vec<Interval>) -> Self {
        Self { bounds }
    }

    pub fn dim(&self) -> usize {
        self.bounds.len()
    }

    pub fn is_well_formed(&self) -> bool {
        self.bounds.iter().all(|b| b.lo <= b.hi)
    }

    pub fn contains(&self, x: &DVector<f64>) -> bool {
        x.len() == self.dim() && self.bounds.iter().zip(x.iter()).all(|(b, &v)| b.contains(v))
    }

    /// Signed distance to the nearest face: positive inside, negative outside.
    pub fn margin(&self, x: &DVector<f64>) -> f64 {
        self.bounds
            .iter()
            .zip(x.iter())
            .map(|(b, &v)| (v - b.lo).min(b.hi - v))
            .fold(f64::INFINITY, f64::min)
    }

    pub fn clamp(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(
            x.len(),
            self.bounds.iter().zip(x.iter()).map(|(b, &v)| v.clamp(b.lo, b.hi)),
        )
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> DVector<f64> {
        DVector::from_iterator(
            self.dim(),
            self.bounds.iter().map(|b| {
                if b.width() > 0.0 {
                    rng.gen_range(b.lo..=b.hi)
                } else {
                    b.lo
                }
            }),
        )
    }

    /// Tensor grid with `counts[i]` points on axis `i`, row-major (last axis fastest).
    pub fn grid(&self, counts: &[usize]) -> Vec<DVector<f64>> {
        let axes: Vec<Vec<f64>> = self
            .bounds
            .iter()
            .zip(counts)
            .map(|(b, &c)| b.linspace(c))
            .collect();
        let total: usize = axes.iter().map(Vec::len).product();
        let mut out = Vec::with_capacity(total);
        let mut idx = vec![0usize; axes.len()];
        for _ in 0..total {
            out.push(DVector::from_iterator(
                axes.len(),
                idx.iter().zip(&axes).map(|(&i, a)| a[i]),
            ));
            for k in (0..axes.len()).rev() {
                idx[k] += 1;
                if idx[k] < axes[k].len() {
                    break;
                }
                idx[k] = 0;
            }
        }
        out
    }
}

/// Known part of a control-affine system `x' = f(x) + B(x) u`.
pub trait ControlAffine: Send + Sync {
    fn state_dim(&self) -> usize;
    fn input_dim(&self) -> usize;
    fn drift(&self, x: &DVector<f64>) -> DVector<f64>;
    fn input_matrix(&self, x: &DVector<f64>) -> DMatrix<f64>;

    /// Analytic `df/dx`, if available.
    fn drift_jacobian(&self, _x: &DVector<f64>) -> Option<DMatrix<f64>> {
        None
    }

    /// True when `B` does not depend on the state.
    fn input_matrix_is_constant(&self) -> bool {
        false
    }

    fn state_names(&self) -> Vec<String> {
        (0..self.state_dim()).map(|i| format!("x{i}")).collect()
    }
}

/// A control-affine model together with its constraint boxes and the
/// Lipschitz/bound constants of the matched uncertainty.
#[derive(Clone)]
pub struct SystemModel {
    dynamics: Arc<dyn ControlAffine>,
    pub x_box: BoxSet,
    pub u_box: BoxSet,
    pub lipschitz_b: f64,
    pub lipschitz_d: f64,
    pub bound_d: f64,
}

impl std::fmt::Debug for SystemModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SystemModel")
            .field("state_dim", &self.state_dim())
            .field("input_dim", &self.input_dim())
            .field("x_box", &self.x_box)
            .field("u_box", &self.u_box)
            .field("lipschitz_b", &self.lipschitz_b)
            .field("lipschitz_d", &self.lipschitz_d)
            .field("bound_d", &self.bound_d)
            .finish()
    }
}

impl SystemModel {
    pub fn new(
        dynamics: Arc<dyn ControlAffine>,
        x_box: BoxSet,
        u_box: BoxSet,
        lipschitz_b: f64,
        lipschitz_d: f64,
        bound_d: f64,
    ) -> Result<Self, DynamicsError> {
        check_dim("x_box", dynamics.state_dim(), x_box.dim())?;
        check_dim("u_box", dynamics.input_dim(), u_box.dim())?;
        if !x_box.is_well_formed() || !u_box.is_well_formed() {
            return Err(DynamicsError::InvalidParameter(
                "box lower bound exceeds upper bound".into(),
            ));
        }
        if lipschitz_b < 0.0 || lipschitz_d < 0.0 || bound_d < 0.0 {
            return Err(DynamicsError::InvalidParameter(
                "Lipschitz and bound constants must be nonnegative".into(),
            ));
        }
        Ok(Self {
            dynamics,
            x_box,
            u_box,
            lipschitz_b,
            lipschitz_d,
            bound_d,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.dynamics.state_dim()
    }

    pub fn input_dim(&self) -> usize {
        self.dynamics.input_dim()
    }

    pub fn state_names(&self) -> Vec<String> {
        self.dynamics.state_names()
    }

    pub fn drift(&self, x: &DVector<f64>) -> DVector<f64> {
        self.dynamics.drift(x)
    }

    pub fn input_matrix(&self, x: &DVector<f64>) -> DMatrix<f64> {
        self.dynamics.input_matrix(x)
    }

    pub fn input_matrix_is_constant(&self) -> bool {
        self.dynamics.input_matrix_is_constant()
    }

    /// `df/dx`: analytic when the model provides it, otherwise central
    /// differences with a relative step of 1e-6.
    pub fn drift_jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        if let Some(j) = self.dynamics.drift_jacobian(x) {
            return j;
        }
        let n = self.state_dim();
        let mut jac = DMatrix::zeros(n, n);
        for k in 0..n {
            let h = 1e-6 * x[k].abs().max(1.0);
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[k] += h;
            xm[k] -= h;
            let col = (self.drift(&xp) - self.drift(&xm)) / (2.0 * h);
            jac.set_column(k, &col);
        }
        jac
    }

    /// `d b_i / dx` for input column `i`, by central differences (zero for constant `B`).
    pub fn input_column_jacobian(&self, x: &DVector<f64>, i: usize) -> DMatrix<f64> {
        let n = self.state_dim();
        if self.input_matrix_is_constant() {
            return DMatrix::zeros(n, n);
        }
        let mut jac = DMatrix::zeros(n, n);
        for k in 0..n {
            let h = 1e-6 * x[k].abs().max(1.0);
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[k] += h;
            xm[k] -= h;
            let col = (self.input_matrix(&xp).column(i) - self.input_matrix(&xm).column(i)) / (2.0 * h);
            jac.set_column(k, &col);
        }
        jac
    }

    /// Nominal dynamics `f(x) + B(x) u`.
    pub fn nominal_derivative(
        &self,
        x: &DVector<f64>,
        u: &DVector<f64>,
    ) -> Result<DVector<f64>, DynamicsError> {
        check_dim("state", self.state_dim(), x.len())?;
        check_dim("input", self.input_dim(), u.len())?;
        Ok(self.drift(x) + self.input_matrix(x) * u)
    }

    /// Smallest singular value of `B(x)` over sampled points of the state box.
    pub fn min_input_singular_value<R: Rng>(&self, rng: &mut R, samples: usize) -> f64 {
        let mut worst = f64::INFINITY;
        let pts = if self.input_matrix_is_constant() { 1 } else { samples.max(1) };
        for _ in 0..pts {
            let x = self.x_box.sample(rng);
            let sv = self.input_matrix(&x).singular_values();
            worst = worst.min(sv.min());
        }
        worst
    }
}

/// Moore-Penrose pseudoinverse of a full-column-rank matrix via SVD.
pub fn pseudo_inverse(b: &DMatrix<f64>) -> DMatrix<f64> {
    b.clone()
        .pseudo_inverse(1e-12)
        .expect("pseudo-inverse with nonnegative tolerance")
}

/// Orthonormal basis of the null space of `B^T` (columns annihilated by `B^T`).
pub fn annihilator(b: &DMatrix<f64>) -> DMatrix<f64> {
    let n = b.nrows();
    let proj = DMatrix::identity(n, n) - b * pseudo_inverse(b);
    let eig = proj.symmetric_eigen();
    let cols: Vec<DVector<f64>> = (0..n)
        .filter(|&i| eig.eigenvalues[i] > 0.5)
        .map(|i| eig.eigenvectors.column(i).into_owned())
        .collect();
    if cols.is_empty() {
        DMatrix::zeros(n, 0)
    } else {
        DMatrix::from_columns(&cols)
    }
}

/// Physical parameters of the planar quadrotor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuadrotorParams {
    /// kg
    pub mass: f64,
    /// kg m^2
    pub inertia: f64,
    /// m
    pub arm: f64,
    /// m/s^2
    pub gravity: f64,
}

impl Default for QuadrotorParams {
    fn default() -> Self {
        Self {
            mass: 0.486,
            inertia: 0.00383,
            arm: 0.25,
            gravity: 9.81,
        }
    }
}

impl QuadrotorParams {
    pub fn validate(&self) -> Result<(), DynamicsError> {
        let ok = [self.mass, self.inertia, self.arm, self.gravity]
            .iter()
            .all(|v| v.is_finite() && *v > 0.0);
        if ok {
            Ok(())
        } else {
            Err(DynamicsError::InvalidParameter(format!(
                "quadrotor parameters must be strictly positive: {self:?}"
            )))
        }
    }

    pub fn hover_thrust_per_rotor(&self) -> f64 {
        0.5 * self.mass * self.gravity
    }
}

/// Planar quadrotor, state `(p_x, p_z, phi, v_x, v_z, phi_dot)` with body-frame
/// velocities, inputs are the two rotor thrusts.
#[derive(Debug, Clone, Copy)]
pub struct PlanarQuadrotor {
    pub params: QuadrotorParams,
}

pub mod quad_index {
    pub const PX: usize = 0;
    pub const PZ: usize = 1;
    pub const PHI: usize = 2;
    pub const VX: usize = 3;
    pub const VZ: usize = 4;
    pub const PHI_DOT: usize = 5;
}

pub const QUADROTOR_STATE_NAMES: [&str; 6] = ["p_x", "p_z", "phi", "v_x", "v_z", "phi_dot"];

impl PlanarQuadrotor {
    pub fn input_matrix_const(&self) -> DMatrix<f64> {
        let p = &self.params;
        let mut b = DMatrix::zeros(6, 2);
        b[(4, 0)] = 1.0 / p.mass;
        b[(4, 1)] = 1.0 / p.mass;
        b[(5, 0)] = p.arm / p.inertia;
        b[(5, 1)] = -p.arm / p.inertia;
        b
    }
}

impl ControlAffine for PlanarQuadrotor {
    fn state_dim(&self) -> usize {
        6
    }

    fn input_dim(&self) -> usize {
        2
    }

    fn drift(&self, x: &DVector<f64>) -> DVector<f64> {
        let g = self.params.gravity;
        let (phi, vx, vz, w) = (x[2], x[3], x[4], x[5]);
        let (s, c) = phi.sin_cos();
        DVector::from_vec(vec![
            vx * c - vz * s,
            vx * s + vz * c,
            w,
            vz * w - g * s,
            -vx * w - g * c,
            0.0,
        ])
    }

    fn input_matrix(&self, _x: &DVector<f64>) -> DMatrix<f64> {
        self.input_matrix_const()
    }

    fn drift_jacobian(&self, x: &DVector<f64>) -> Option<DMatrix<f64>> {
        let g = self.params.gravity;
        let (phi, vx, vz, w) = (x[2], x[3], x[4], x[5]);
        let (s, c) = phi.sin_cos();
        let mut a = DMatrix::zeros(6, 6);
        a[(0, 2)] = -vx * s - vz * c;
        a[(0, 3)] = c;
        a[(0, 4)] = -s;
        a[(1, 2)] = vx * c - vz * s;
        a[(1, 3)] = s;
        a[(1, 4)] = c;
        a[(2, 5)] = 1.0;
        a[(3, 2)] = -g * c;
        a[(3, 4)] = w;
        a[(3, 5)] = vz;
        a[(4, 2)] = g * s;
        a[(4, 3)] = -w;
        a[(4, 5)] = -vx;
        Some(a)
    }

    fn input_matrix_is_constant(&self) -> bool {
        true
    }

    fn state_names(&self) -> Vec<String> {
        QUADROTOR_STATE_NAMES.iter().map(|s| s.to_string()).collect()
    }
}

/// Lipschitz constant of the quadrotor wind field over the state box.
pub const QUADROTOR_LIPSCHITZ_D: f64 = 4.0;
/// Uniform bound of the quadrotor wind field over the state box.
pub const QUADROTOR_BOUND_D: f64 = 3.54;

/// Planar quadrotor with its state and input boxes.
///
/// The vertical body velocity is boxed to `[-1, 1]`.
pub fn quadrotor_model(params: QuadrotorParams) -> Result<SystemModel, DynamicsError> {
    params.validate()?;
    let x_box = BoxSet::new(vec![
        Interval::new(0.0, 15.0),
        Interval::new(0.0, 15.0),
        Interval::new(-FRAC_PI_3, FRAC_PI_3),
        Interval::new(-2.0, 2.0),
        Interval::new(-1.0, 1.0),
        Interval::new(-FRAC_PI_3, FRAC_PI_3),
    ]);
    let u_max = 1.5 * params.mass * params.gravity;
    let u_box = BoxSet::new(vec![Interval::new(0.0, u_max); 2]);
    SystemModel::new(
        Arc::new(PlanarQuadrotor { params }),
        x_box,
        u_box,
        0.0,
        QUADROTOR_LIPSCHITZ_D,
        QUADROTOR_BOUND_D,
    )
}

/// Matched disturbance `d(x)` acting on the input channels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DisturbanceKind {
    Zero { input_dim: usize },
    Constant { value: Vec<f64> },
    /// `d(x) = 0.5 (v_x^2 + v_z^2) / (p_x^2 + p_z^2 + 1) [1, 1]^T`
    QuadrotorWind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DisturbanceField {
    pub kind: DisturbanceKind,
    pub declared_lipschitz: f64,
    pub declared_bound: f64,
}

/// Result of a sampled Lipschitz/bound audit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FieldAudit {
    pub max_ratio: f64,
    pub max_norm: f64,
    pub lipschitz_ok: bool,
    pub bound_ok: bool,
}

impl DisturbanceField {
    pub fn zero(input_dim: usize) -> Self {
        Self {
            kind: DisturbanceKind::Zero { input_dim },
            declared_lipschitz: 0.0,
            declared_bound: 0.0,
        }
    }

    pub fn constant(value: Vec<f64>) -> Self {
        let norm = value.iter().map(|v| v * v).sum::<f64>().sqrt();
        Self {
            kind: DisturbanceKind::Constant { value },
            declared_lipschitz: 0.0,
            declared_bound: norm,
        }
    }

    pub fn input_dim(&self) -> usize {
        match &self.kind {
            DisturbanceKind::Zero { input_dim } => *input_dim,
            DisturbanceKind::Constant { value } => value.len(),
            DisturbanceKind::QuadrotorWind => 2,
        }
    }

    pub fn eval(&self, x: &DVector<f64>) -> DVector<f64> {
        match &self.kind {
            DisturbanceKind::Zero { input_dim } => DVector::zeros(*input_dim),
            DisturbanceKind::Constant { value } => DVector::from_column_slice(value),
            DisturbanceKind::QuadrotorWind => {
                let (px, pz, vx, vz) = (x[0], x[1], x[3], x[4]);
                let rho = 1.0 / (px * px + pz * pz + 1.0);
                let mag = rho * 0.5 * (vx * vx + vz * vz);
                DVector::from_element(2, mag)
            }
        }
    }

    /// Checks the declared Lipschitz constant and bound on `pairs` random pairs in `bx`.
    pub fn audit<R: Rng>(&self, bx: &BoxSet, pairs: usize, rng: &mut R) -> FieldAudit {
        let mut max_ratio = 0.0f64;
        let mut max_norm = 0.0f64;
        for _ in 0..pairs {
            let x = bx.sample(rng);
            let y = bx.sample(rng);
            let dx = self.eval(&x);
            let dy = self.eval(&y);
            max_norm = max_norm.max(dx.norm()).max(dy.norm());
            let dist = (&x - &y).norm();
            if dist > 1e-12 {
                max_ratio = max_ratio.max((dx - dy).norm() / dist);
            }
        }
        FieldAudit {
            max_ratio,
            max_norm,
            lipschitz_ok: max_ratio <= self.declared_lipschitz,
            bound_ok: max_norm <= self.declared_bound,
        }
    }
}

/// The wind field used in the quadrotor experiments.
pub fn paper_disturbance() -> DisturbanceField {
    DisturbanceField {
        kind: DisturbanceKind::QuadrotorWind,
        declared_lipschitz: QUADROTOR_LIPSCHITZ_D,
        declared_bound: QUADROTOR_BOUND_D,
    }
}

/// Anything that produces an estimate `d_hat(x)` of the matched uncertainty.
pub trait UncertaintyModel: Send + Sync {
    fn output_dim(&self) -> usize;
    fn predict(&self, x: &DVector<f64>) -> DVector<f64>;
}

/// The no-learning model `d_hat = 0`.
#[derive(Debug, Clone, Copy)]
pub struct NoLearning {
    pub input_dim: usize,
}

impl UncertaintyModel for NoLearning {
    fn output_dim(&self) -> usize {
        self.input_dim
    }

    fn predict(&self, _x: &DVector<f64>) -> DVector<f64> {
        DVector::zeros(self.input_dim)
    }
}

/// Uses the true field as the learned model.
impl UncertaintyModel for DisturbanceField {
    fn output_dim(&self) -> usize {
        self.input_dim()
    }

    fn predict(&self, x: &DVector<f64>) -> DVector<f64> {
        self.eval(x)
    }
}

/// True dynamics `f(x) + B(x) (u + d(x))`.
pub fn true_derivative(
    model: &SystemModel,
    dist: &DisturbanceField,
    x: &DVector<f64>,
    u: &DVector<f64>,
) -> Result<DVector<f64>, DynamicsError> {
    check_dim("state", model.state_dim(), x.len())?;
    check_dim("input", model.input_dim(), u.len())?;
    check_dim("disturbance", model.input_dim(), dist.input_dim())?;
    let b = model.input_matrix(x);
    Ok(model.drift(x) + b * (u + dist.eval(x)))
}

/// Learned dynamics `F_l(x, u) = f(x) + B(x) d_hat(x) + B(x) u`.
pub fn learned_derivative(
    model: &SystemModel,
    dhat: &dyn UncertaintyModel,
    x: &DVector<f64>,
    u: &DVector<f64>,
) -> Result<DVector<f64>, DynamicsError> {
    check_dim("state", model.state_dim(), x.len())?;
    check_dim("input", model.input_dim(), u.len())?;
    check_dim("learned model output", model.input_dim(), dhat.output_dim())?;
    let b = model.input_matrix(x);
    Ok(model.drift(x) + b * (u + dhat.predict(x)))
}

/// One classical RK4 step of `x' = deriv(t, x)`.
pub fn rk4_step<F>(deriv: &mut F, t: f64, x: &DVector<f64>, dt: f64) -> DVector<f64>
where
    F: FnMut(f64, &DVector<f64>) -> DVector<f64>,
{
    let k1 = deriv(t, x);
    let k2 = deriv(t + 0.5 * dt, &(x + &k1 * (0.5 * dt)));
    let k3 = deriv(t + 0.5 * dt, &(x + &k2 * (0.5 * dt)));
    let k4 = deriv(t + dt, &(x + &k3 * dt));
    x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0)
}

/// Fixed-step RK4 over `[0, t_span]`; returns the state at every step boundary
/// (`round(t_span / dt) + 1` states).
pub fn integrate_rk4<F>(
    mut deriv: F,
    x0: &DVector<f64>,
    t_span: f64,
    dt: f64,
) -> Result<Vec<DVector<f64>>, DynamicsError>
where
    F: FnMut(f64, &DVector<f64>) -> DVector<f64>,
{
    if !(dt > 0.0) || !(t_span >= dt) || !t_span.is_finite() {
        return Err(DynamicsError::InvalidStep { dt, t_span });
    }
    let steps = (t_span / dt).round() as usize;
    let mut out = Vec::with_capacity(steps + 1);
    out.push(x0.clone());
    let mut x = x0.clone();
    for k in 0..steps {
        let t = k as f64 * dt;
        let next = rk4_step(&mut deriv, t, &x, dt);
        if next.iter().any(|v| !v.is_finite()) {
            return Err(DynamicsError::Diverged { last_valid_time: t });
        }
        x = next;
        out.push(x.clone());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn hover_state(px: f64, pz: f64) -> DVector<f64> {
        DVector::from_vec(vec![px, pz, 0.0, 0.0, 0.0, 0.0])
    }

    #[test]
    fn hover_is_an_equilibrium() {
        let model = quadrotor_model(QuadrotorParams::default()).unwrap();
        let p = QuadrotorParams::default();
        let u = DVector::from_element(2, p.hover_thrust_per_rotor());
        let xd = true_derivative(&model, &DisturbanceField::zero(2), &hover_state(3.0, 4.0), &u).unwrap();
        assert!(xd.amax() < 1e-14, "{xd}");
    }

    #[test]
    fn quadrotor_constants() {
        let p = QuadrotorParams::default();
        assert_eq!((p.mass, p.inertia, p.arm), (0.486, 0.00383, 0.25));
        let model = quadrotor_model(p).unwrap();
        assert_eq!(model.lipschitz_b, 0.0);
        assert_eq!(model.lipschitz_d, 4.0);
        assert_eq!(model.bound_d, 3.54);
        assert!((model.u_box.bounds[0].hi - 1.5 * 0.486 * 9.81).abs() < 1e-12);
        assert_eq!(model.x_box.bounds[4], Interval::new(-1.0, 1.0));
    }

    #[test]
    fn pseudo_inverse_of_quadrotor_b_is_left_inverse() {
        let quad = PlanarQuadrotor { params: QuadrotorParams::default() };
        let b = quad.input_matrix_const();
        let prod = pseudo_inverse(&b) * &b;
        assert!((prod - DMatrix::identity(2, 2)).amax() < 1e-12);
        let perp = annihilator(&b);
        assert_eq!(perp.ncols(), 4);
        assert!((perp.transpose() * &b).amax() < 1e-12);
    }

    #[test]
    fn wind_field_values() {
        let d = paper_disturbance();
        let x = DVector::from_vec(vec![0.0, 0.0, 0.3, 2.0, 1.0, 0.0]);
        let v = d.eval(&x);
        assert!((v[0] - 2.5).abs() < 1e-15 && (v[1] - 2.5).abs() < 1e-15);
        let at_rest = DVector::from_vec(vec![1.0, 2.0, 0.3, 0.0, 0.0, 0.7]);
        assert_eq!(d.eval(&at_rest).amax(), 0.0);
    }

    #[test]
    fn wind_bound_holds_on_grid() {
        let model = quadrotor_model(QuadrotorParams::default()).unwrap();
        let d = paper_disturbance();
        let worst = model
            .x_box
            .grid(&[16, 16, 3, 9, 9, 3])
            .iter()
            .map(|x| d.eval(x).norm())
            .fold(0.0, f64::max);
        assert!(worst <= 3.54, "{worst}");
        // attained at the origin corner with maximal speed
        assert!(worst > 3.53);
    }

    #[test]
    fn sampled_lipschitz_audit() {
        let model = quadrotor_model(QuadrotorParams::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let audit = paper_disturbance().audit(&model.x_box, 10_000, &mut rng);
        assert!(audit.lipschitz_ok && audit.bound_ok, "{audit:?}");
    }

    #[test]
    fn termwise_assembly_matches() {
        let model = quadrotor_model(QuadrotorParams::default()).unwrap();
        let p = QuadrotorParams::default();
        let d = paper_disturbance();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let x = model.x_box.sample(&mut rng);
            let u = model.u_box.sample(&mut rng);
            let got = true_derivative(&model, &d, &x, &u).unwrap();
            // independent re-implementation of the planar quadrotor equations
            let (phi, vx, vz, w) = (x[2], x[3], x[4], x[5]);
            let dd = 0.5 * (vx * vx + vz * vz) / (x[0] * x[0] + x[1] * x[1] + 1.0);
            let (t1, t2) = (u[0] + dd, u[1] + dd);
            let want = [
                vx * phi.cos() - vz * phi.sin(),
                vx * phi.sin() + vz * phi.cos(),
                w,
                vz * w - p.gravity * phi.sin(),
                -vx * w - p.gravity * phi.cos() + (t1 + t2) / p.mass,
                p.arm / p.inertia * (t1 - t2),
            ];
            for i in 0..6 {
                assert!((got[i] - want[i]).abs() <= 1e-12 * (1.0 + want[i].abs()));
            }
        }
    }

    #[test]
    fn learned_dynamics_special_cases() {
        let model = quadrotor_model(QuadrotorParams::default()).unwrap();
        let d = paper_disturbance();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let none = NoLearning { input_dim: 2 };
        for _ in 0..100 {
            let x = model.x_box.sample(&mut rng);
            let u = model.u_box.sample(&mut rng);
            let nominal = model.nominal_derivative(&x, &u).unwrap();
            assert_eq!(learned_derivative(&model, &none, &x, &u).unwrap(), nominal);
            let perfect = learned_derivative(&model, &d, &x, &u).unwrap();
            assert_eq!(perfect, true_derivative(&model, &d, &x, &u).unwrap());
        }
    }

    #[test]
    fn dimension_errors() {
        let model = quadrotor_model(QuadrotorParams::default()).unwrap();
        let x = DVector::zeros(5);
        let u = DVector::zeros(2);
        assert!(matches!(
            true_derivative(&model, &paper_disturbance(), &x, &u),
            Err(DynamicsError::Dimension { .. })
        ));
        assert!(learned_derivative(&model, &NoLearning { input_dim: 3 }, &DVector::zeros(6), &u).is_err());
    }

    #[test]
    fn rk4_scalar_decay() {
        let path = integrate_rk4(|_, x| -x, &DVector::from_element(1, 1.0), 1.0, 0.01).unwrap();
        assert_eq!(path.len(), 101);
        assert!((path[100][0] - (-1.0f64).exp()).abs() < 1e-9);
    }

    #[test]
    fn rk4_reports_divergence() {
        let err = integrate_rk4(|_, x| x.map(|v| v * v), &DVector::from_element(1, 1.0), 2.0, 0.01)
            .unwrap_err();
        match err {
            DynamicsError::Diverged { last_valid_time } => assert!(last_valid_time > 0.9 && last_valid_time < 2.0),
            e => panic!("unexpected {e}"),
        }
        assert!(integrate_rk4(|_, x| -x, &DVector::from_element(1, 1.0), 1.0, 0.0).is_err());
    }

    #[test]
    fn hover_stays_put_under_integration() {
        let model = quadrotor_model(QuadrotorParams::default()).unwrap();
        let u = DVector::from_element(2, QuadrotorParams::default().hover_thrust_per_rotor());
        let dist = DisturbanceField::zero(2);
        let x0 = hover_state(5.0, 5.0);
        let path = integrate_rk4(|_, x| true_derivative(&model, &dist, x, &u).unwrap(), &x0, 2.0, 0.0005)
            .unwrap();
        assert!((path.last().unwrap() - &x0).amax() < 1e-12);
    }

    #[test]
    fn grid_enumerates_tensor_product() {
        let b = BoxSet::new(vec![Interval::new(0.0, 1.0), Interval::new(-1.0, 1.0)]);
        let g = b.grid(&[2, 3]);
        assert_eq!(g.len(), 6);
        assert_eq!(g[0].as_slice(), &[0.0, -1.0]);
        assert_eq!(g[5].as_slice(), &[1.0, 1.0]);
        assert_eq!(b.grid(&[1, 1])[0].as_slice(), &[0.5, 0.0]);
    }
}
