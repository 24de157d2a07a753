//! Piecewise-constant disturbance estimation and its error bound.
//!
//! A state predictor `x_hat' = f(x) + B(x) u + sigma_hat - a (x_hat - x)` runs
//! alongside the plant. Every `T` seconds the lumped estimate is reset to
//! `sigma_hat = -a / (e^{aT} - 1) (x_hat - x)` and held until the next sample;
//! the matched part is recovered as `d_check = B(x)^+ sigma_hat`.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{check_dim, pseudo_inverse, rk4_step, DynamicsError, SystemModel};

#[derive(Debug, Error)]
pub enum EstimatorError {
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error("invalid estimator parameters: {0}")]
    InvalidParameter(String),
    #[error("sample update requested at t = {t}, which is not a multiple of T = {period}")]
    OffGrid { t: f64, period: f64 },
    #[error("predictor state became non-finite")]
    NonFinite,
    #[error("empty grid")]
    EmptyGrid,
}

/// `-a / (e^{aT} - 1)`, the gain of the sampled update.
pub fn update_gain(a: f64, period: f64) -> f64 {
    -a / (a * period).exp_m1()
}

/// Number of integration steps per sampling period; errors unless `dt`
/// divides `period` to within round-off.
pub fn steps_per_sample(period: f64, dt: f64) -> Result<usize, EstimatorError> {
    if !(period > 0.0) || !(dt > 0.0) {
        return Err(EstimatorError::InvalidParameter("T and dt must be positive".into()));
    }
    let ratio = period / dt;
    let k = ratio.round();
    if k < 1.0 || (ratio - k).abs() > 1e-9 * ratio {
        return Err(EstimatorError::InvalidParameter(format!(
            "dt = {dt} does not divide T = {period}"
        )));
    }
    Ok(k as usize)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorState {
    pub x_hat: DVector<f64>,
    pub sigma_hat: DVector<f64>,
    pub d_check: DVector<f64>,
    pub a: f64,
    pub period: f64,
    pub last_sample_index: u64,
}

impl EstimatorState {
    /// Predictor initialized at the measured state, estimates zero.
    pub fn new(model: &SystemModel, x0: &DVector<f64>, a: f64, period: f64) -> Result<Self, EstimatorError> {
        check_dim("state", model.state_dim(), x0.len())?;
        if !(a > 0.0) || !(period > 0.0) {
            return Err(EstimatorError::InvalidParameter(format!("need a > 0 and T > 0 (got {a}, {period})")));
        }
        Ok(Self {
            x_hat: x0.clone(),
            sigma_hat: DVector::zeros(model.state_dim()),
            d_check: DVector::zeros(model.input_dim()),
            a,
            period,
            last_sample_index: 0,
        })
    }

    /// `x_hat - x`.
    pub fn prediction_error(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.x_hat - x
    }

    /// One RK4 step of the predictor with `x`, `u` and `sigma_hat` frozen.
    pub fn predictor_step(
        &mut self,
        model: &SystemModel,
        x: &DVector<f64>,
        u: &DVector<f64>,
        dt: f64,
    ) -> Result<(), EstimatorError> {
        let base = model.nominal_derivative(x, u)? + &self.sigma_hat + x * self.a;
        let a = self.a;
        let mut rhs = |_: f64, xh: &DVector<f64>| &base - xh * a;
        let next = rk4_step(&mut rhs, 0.0, &self.x_hat, dt);
        if next.iter().any(|v| !v.is_finite()) {
            return Err(EstimatorError::NonFinite);
        }
        self.x_hat = next;
        Ok(())
    }

    /// Applies the sampled update at `t = iT`. At `i = 0` the estimate stays
    /// zero.
    pub fn sample_update(&mut self, model: &SystemModel, x: &DVector<f64>, t: f64) -> Result<(), EstimatorError> {
        let i = (t / self.period).round();
        if i < 0.0 || (t - i * self.period).abs() > 1e-9 * self.period.max(t) {
            return Err(EstimatorError::OffGrid { t, period: self.period });
        }
        if i == 0.0 {
            return Ok(());
        }
        let b_pinv = pseudo_inverse(&model.input_matrix(x));
        self.apply_update(x, &b_pinv, i as u64);
        Ok(())
    }

    /// Sample update with a precomputed `B^+` (for constant `B`).
    pub fn apply_update(&mut self, x: &DVector<f64>, b_pinv: &DMatrix<f64>, index: u64) {
        self.sigma_hat = self.prediction_error(x) * update_gain(self.a, self.period);
        self.d_check = b_pinv * &self.sigma_hat;
        self.last_sample_index = index;
    }
}

/// Constants entering the estimation error bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EebParams {
    pub phi: f64,
    pub max_b: f64,
    pub max_b_pinv: f64,
    pub lipschitz_b: f64,
    pub lipschitz_d: f64,
    pub bound_d: f64,
    pub n: usize,
    pub a: f64,
    pub period: f64,
}

impl EebParams {
    pub fn validate(&self) -> Result<(), EstimatorError> {
        let all = [self.phi, self.max_b, self.max_b_pinv, self.lipschitz_b, self.lipschitz_d, self.bound_d, self.a, self.period];
        if all.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) || self.n == 0 {
            return Err(EstimatorError::InvalidParameter("EEB constants must be finite and nonnegative".into()));
        }
        if self.phi < self.bound_d * self.max_b * (1.0 - 1e-12) {
            return Err(EstimatorError::InvalidParameter("phi must be at least b_d max|B|".into()));
        }
        Ok(())
    }

    /// `alpha(T) = 2 sqrt(n) phi T (L_d max|B| + L_B b_d) + (1 - e^{-aT}) sqrt(n) b_d max|B|`.
    pub fn alpha(&self, period: f64) -> f64 {
        let rn = (self.n as f64).sqrt();
        2.0 * rn * self.phi * period * (self.lipschitz_d * self.max_b + self.lipschitz_b * self.bound_d)
            - (-self.a * period).exp_m1() * rn * self.bound_d * self.max_b
    }

    /// Largest `T` with `alpha(T) max|B^+| <= target`, by bisection.
    pub fn period_for_bound(&self, target: f64) -> f64 {
        let f = |t: f64| self.alpha(t) * self.max_b_pinv - target;
        let (mut lo, mut hi) = (0.0, 1.0);
        while f(hi) < 0.0 && hi < 1e6 {
            hi *= 2.0;
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if f(mid) <= 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        lo
    }
}

/// `delta(t, T)`: `b_d` before the first sample, `alpha(T) max|B^+|` after.
pub fn compute_eeb(p: &EebParams, t: f64) -> f64 {
    if t < p.period {
        p.bound_d
    } else {
        p.alpha(p.period) * p.max_b_pinv
    }
}

/// Grid maximum of `|f(x) + B(x) u|` plus `b_d max|B(x)|`, with the norms of
/// `B` and `B^+` seen on the same grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhiReport {
    pub phi: f64,
    pub max_state_derivative: f64,
    pub max_b: f64,
    pub max_b_pinv: f64,
    pub points_per_axis: usize,
    pub points_evaluated: u64,
}

/// Maximizes over a `count`-per-axis tensor grid of the state and input boxes.
pub fn compute_phi(model: &SystemModel, bound_d: f64, count: usize) -> Result<PhiReport, EstimatorError> {
    if count == 0 {
        return Err(EstimatorError::EmptyGrid);
    }
    let n = model.state_dim();
    let m = model.input_dim();
    let xs = model.x_box.grid(&vec![count; n]);
    let us: Vec<Vec<f64>> = model
        .u_box
        .grid(&vec![count; m])
        .into_iter()
        .map(|u| u.iter().copied().collect())
        .collect();
    let per_x: Vec<(f64, f64, f64)> = xs
        .par_iter()
        .map(|x| {
            let f = model.drift(x);
            let b = model.input_matrix(x);
            let mut best = 0.0f64;
            let mut v = vec![0.0; n];
            for u in &us {
                for (r, vr) in v.iter_mut().enumerate() {
                    let mut acc = f[r];
                    for (c, uc) in u.iter().enumerate() {
                        acc += b[(r, c)] * uc;
                    }
                    *vr = acc;
                }
                best = best.max(v.iter().map(|e| e * e).sum::<f64>());
            }
            let sv = b.singular_values();
            (best.sqrt(), sv.max(), 1.0 / sv.min())
        })
        .collect();
    let (mut fmax, mut bmax, mut pmax) = (0.0f64, 0.0f64, 0.0f64);
    for (a, b, c) in per_x {
        fmax = fmax.max(a);
        bmax = bmax.max(b);
        pmax = pmax.max(c);
    }
    Ok(PhiReport {
        phi: fmax + bound_d * bmax,
        max_state_derivative: fmax,
        max_b: bmax,
        max_b_pinv: pmax,
        points_per_axis: count,
        points_evaluated: (xs.len() * us.len()) as u64,
    })
}
