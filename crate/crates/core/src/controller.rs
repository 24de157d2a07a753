//! Robust Riemannian-energy condition and the pointwise min-norm control law.
//!
//! With `g0 = gamma_s(0)^T M(x*)` and `g1 = gamma_s(1)^T M(x)`, the condition
//! on the input `k` reads
//!
//! `phi0 + phi1 (k - u*) <= 0`,
//! `phi0 = g1 (f + B (u* + d_check)) + |g1 B| delta - g0 xdot* + lambda E`,
//! `phi1 = g1 B`,
//!
//! and the input closest to `u*` satisfying it has a closed form.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{learned_derivative, DynamicsError, SystemModel, UncertaintyModel};
use crate::geodesic::{first_variation_terms, GeodesicCurve, GeodesicError};
use crate::metric::MetricPolynomial;

#[derive(Debug, Error)]
pub enum ControlError {
    #[error(transparent)]
    Geodesic(#[from] GeodesicError),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error("constraint active (phi0 = {phi0}) but |phi1| = {phi1_norm} gives no descent direction")]
    InfeasibleDirection { phi0: f64, phi1_norm: f64 },
    #[error("negative estimation error bound {0}")]
    NegativeDelta(f64),
}

/// Terms of the robust energy condition at one control instant.
#[derive(Debug, Clone, PartialEq)]
pub struct RreTerms {
    pub phi0: f64,
    pub phi1: DVector<f64>,
    pub energy: f64,
    pub lambda: f64,
    /// `gamma_s(1)^T M(x)` as a column.
    pub g1: DVector<f64>,
    /// `gamma_s(0)^T M(x*) xdot*`.
    pub g0_xdot_star: f64,
    pub delta: f64,
}

impl RreTerms {
    /// `phi0 + phi1 (u - u*)`: the left side of the condition plus `lambda E`,
    /// nonpositive when the condition holds at `u`.
    pub fn slack(&self, u: &DVector<f64>, u_star: &DVector<f64>) -> f64 {
        self.phi0 + self.phi1.dot(&(u - u_star))
    }

    /// `(1/2) dE/dt + lambda E` under the true dynamics with input `u` and
    /// disturbance `d`; nonpositive when energy decays at rate `2 lambda`.
    pub fn true_slack(&self, model: &SystemModel, x: &DVector<f64>, u: &DVector<f64>, d: &DVector<f64>) -> f64 {
        let xdot = model.drift(x) + model.input_matrix(x) * (u + d);
        self.g1.dot(&xdot) - self.g0_xdot_star + self.lambda * self.energy
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControlDecision {
    pub u: DVector<f64>,
    pub constraint_active: bool,
    /// `phi0 + phi1 (u - u*)` at the returned `u`.
    pub rre_slack: f64,
    pub geodesic_iterations: usize,
    pub geodesic_converged: bool,
}

/// Assembles `phi0`, `phi1` from a geodesic between `x_star` and `x`.
#[allow(clippy::too_many_arguments)]
pub fn build_rre_terms(
    curve: &GeodesicCurve,
    metric: &MetricPolynomial,
    model: &SystemModel,
    x: &DVector<f64>,
    x_star: &DVector<f64>,
    u_star: &DVector<f64>,
    xdot_star: &DVector<f64>,
    d_check: &DVector<f64>,
    delta: f64,
) -> Result<RreTerms, ControlError> {
    if !(delta >= 0.0) {
        return Err(ControlError::NegativeDelta(delta));
    }
    let (g1, g0) = first_variation_terms(curve, metric, x_star, x)?;
    let b = model.input_matrix(x);
    let phi1 = b.transpose() * &g1;
    let xdot_check = model.drift(x) + &b * (u_star + d_check);
    let g0_xdot_star = g0.dot(xdot_star);
    let lambda = metric.lambda;
    let phi0 = g1.dot(&xdot_check) + phi1.norm() * delta - g0_xdot_star + lambda * curve.energy;
    Ok(RreTerms {
        phi0,
        phi1,
        energy: curve.energy,
        lambda,
        g1,
        g0_xdot_star,
        delta,
    })
}

/// `u*` if `phi0 <= 0`, else `u* - phi0 phi1 / |phi1|^2`.
pub fn min_norm_control(terms: &RreTerms, u_star: &DVector<f64>) -> Result<ControlDecision, ControlError> {
    if terms.phi0 <= 0.0 {
        return Ok(ControlDecision {
            u: u_star.clone(),
            constraint_active: false,
            rre_slack: terms.phi0,
            geodesic_iterations: 0,
            geodesic_converged: true,
        });
    }
    let n2 = terms.phi1.norm_squared();
    if n2.sqrt() <= 1e-12 {
        return Err(ControlError::InfeasibleDirection {
            phi0: terms.phi0,
            phi1_norm: n2.sqrt(),
        });
    }
    let u = u_star - &terms.phi1 * (terms.phi0 / n2);
    Ok(ControlDecision {
        rre_slack: terms.slack(&u, u_star),
        u,
        constraint_active: true,
        geodesic_iterations: 0,
        geodesic_converged: true,
    })
}

/// Robust controller: energy condition with the estimate `d_check` and its
/// error bound `delta`.
#[allow(clippy::too_many_arguments)]
pub fn rd_ccm_control(
    curve: &GeodesicCurve,
    metric: &MetricPolynomial,
    model: &SystemModel,
    x: &DVector<f64>,
    x_star: &DVector<f64>,
    u_star: &DVector<f64>,
    xdot_star: &DVector<f64>,
    d_check: &DVector<f64>,
    delta: f64,
) -> Result<(ControlDecision, RreTerms), ControlError> {
    let terms = build_rre_terms(curve, metric, model, x, x_star, u_star, xdot_star, d_check, delta)?;
    let mut dec = min_norm_control(&terms, u_star)?;
    dec.geodesic_iterations = curve.iterations;
    dec.geodesic_converged = curve.converged;
    Ok((dec, terms))
}

/// Baseline controller that trusts the learned model: `d_check = d_hat(x)`,
/// `delta = 0`.
#[allow(clippy::too_many_arguments)]
pub fn nominal_ccm_control(
    curve: &GeodesicCurve,
    metric: &MetricPolynomial,
    model: &SystemModel,
    dhat: &dyn UncertaintyModel,
    x: &DVector<f64>,
    x_star: &DVector<f64>,
    u_star: &DVector<f64>,
    xdot_star: &DVector<f64>,
) -> Result<(ControlDecision, RreTerms), ControlError> {
    rd_ccm_control(curve, metric, model, x, x_star, u_star, xdot_star, &dhat.predict(x), 0.0)
}

/// `xdot* = F_l(x*, u*)`.
pub fn reference_derivative(
    model: &SystemModel,
    dhat: &dyn UncertaintyModel,
    x_star: &DVector<f64>,
    u_star: &DVector<f64>,
) -> Result<DVector<f64>, ControlError> {
    Ok(learned_derivative(model, dhat, x_star, u_star)?)
}

/// Clamps `u` to the input box; returns whether any component moved.
pub fn saturate(model: &SystemModel, u: &DVector<f64>) -> (DVector<f64>, bool) {
    let c = model.u_box.clamp(u);
    let hit = c != *u;
    (c, hit)
}

/// Admissibility of a planned trajectory for the true system.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeasibilityReport {
    /// `min_i (half width_i - b_d)`: positive iff the shrunk input box is nonempty.
    pub shrunk_set_margin: f64,
    /// Worst signed distance of `u* + d_hat(x*)` to the boundary of the input
    /// box shrunk by `b_d` per axis; `>= 0` means inside.
    pub input_margin: f64,
    pub input_violations: usize,
    pub first_input_violation_time: Option<f64>,
    /// Worst signed distance of `x*` to the boundary of the state box.
    pub state_margin: f64,
    pub state_violations: usize,
    /// Worst of `(state-box margin of x*(t)) - (tube radius at t)`; `None`
    /// without an initial state.
    pub tube_margin: Option<f64>,
    pub tube_violations: usize,
    pub samples: usize,
}

impl FeasibilityReport {
    pub fn passes(&self) -> bool {
        self.input_margin >= 0.0 && self.state_margin >= 0.0 && self.tube_margin.is_none_or(|m| m >= 0.0)
    }
}

/// Checks `u*(t) + d_hat(x*(t))` against the input box shrunk by the
/// `b_d`-ball, `x*(t)` against the state box, and, given the actual initial
/// state, the tube `|y - x*(t)| <= R |x(0) - x*(0)| e^{-lambda t}` against
/// the state box.
#[allow(clippy::too_many_arguments)]
pub fn check_feasible_plan(
    model: &SystemModel,
    dhat: &dyn UncertaintyModel,
    t_grid: &[f64],
    x_star: &[DVector<f64>],
    u_star: &[DVector<f64>],
    tube: Option<(&DVector<f64>, &MetricPolynomial)>,
) -> FeasibilityReport {
    let bd = model.bound_d;
    let shrunk_set_margin = model
        .u_box
        .bounds
        .iter()
        .map(|b| 0.5 * b.width() - bd)
        .fold(f64::INFINITY, f64::min);
    let mut input_margin = f64::INFINITY;
    let mut input_violations = 0;
    let mut first_input_violation_time = None;
    let mut state_margin = f64::INFINITY;
    let mut state_violations = 0;
    let mut tube_margin: Option<f64> = None;
    let mut tube_violations = 0;
    let tube_scale = tube.map(|(x0, metric)| (metric.overshoot() * (x0 - &x_star[0]).norm(), metric.lambda));
    for ((t, xs), us) in t_grid.iter().zip(x_star).zip(u_star) {
        let v = us + dhat.predict(xs);
        let mut worst = f64::INFINITY;
        for (vi, b) in v.iter().zip(&model.u_box.bounds) {
            worst = worst.min(vi - (b.lo + bd)).min((b.hi - bd) - vi);
        }
        if worst < 0.0 {
            input_violations += 1;
            first_input_violation_time.get_or_insert(*t);
        }
        input_margin = input_margin.min(worst);
        let sm = model.x_box.margin(xs);
        if sm < 0.0 {
            state_violations += 1;
        }
        state_margin = state_margin.min(sm);
        if let Some((r0, lambda)) = tube_scale {
            let tm = sm - r0 * (-lambda * t).exp();
            if tm < 0.0 {
                tube_violations += 1;
            }
            tube_margin = Some(tube_margin.map_or(tm, |m: f64| m.min(tm)));
        }
    }
    FeasibilityReport {
        shrunk_set_margin,
        input_margin,
        input_violations,
        first_input_violation_time,
        state_margin,
        state_violations,
        tube_margin,
        tube_violations,
        samples: t_grid.len(),
    }
}
