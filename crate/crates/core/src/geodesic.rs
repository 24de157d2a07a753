//! Minimizing geodesics under a state-dependent metric.
//!
//! The curve `gamma(s)`, `s in [0, 1]`, is a Chebyshev series in `tau = 2s - 1`
//! per state coordinate. The two highest coefficients are eliminated by the
//! endpoint conditions `gamma(0) = x*`, `gamma(1) = x`, which leaves an
//! unconstrained problem in the remaining coefficients. The energy
//! `int gamma_s^T M(gamma) gamma_s ds` is discretized with Clenshaw-Curtis
//! quadrature on Chebyshev-Gauss-Lobatto nodes and minimized by Gauss-Newton
//! with a backtracking line search.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metric::{MetricError, MetricPolynomial};

#[derive(Debug, Error)]
pub enum GeodesicError {
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("invalid solver configuration: {0}")]
    Config(String),
    #[error("curve endpoints do not match the requested states")]
    EndpointMismatch,
    #[error("dimension mismatch between metric ({metric}) and states ({state})")]
    Dimension { metric: usize, state: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeodesicSolverConfig {
    /// Chebyshev coefficients per coordinate (`>= 3`).
    pub basis_order: usize,
    /// Number of quadrature intervals; `quadrature_order + 1` CGL nodes.
    pub quadrature_order: usize,
    pub max_iters: usize,
    /// Stationarity tolerance, infinity norm of the energy gradient.
    pub grad_tol: f64,
}

impl Default for GeodesicSolverConfig {
    fn default() -> Self {
        Self {
            basis_order: 6,
            quadrature_order: 12,
            max_iters: 100,
            grad_tol: 1e-8,
        }
    }
}

impl GeodesicSolverConfig {
    pub fn validate(&self) -> Result<(), GeodesicError> {
        if self.basis_order < 3 {
            return Err(GeodesicError::Config("basis_order must be at least 3".into()));
        }
        if self.quadrature_order < 2 {
            return Err(GeodesicError::Config("quadrature_order must be at least 2".into()));
        }
        if !(self.grad_tol > 0.0) || self.max_iters == 0 {
            return Err(GeodesicError::Config("tolerances and iteration budget must be positive".into()));
        }
        Ok(())
    }
}

/// Chebyshev polynomials `T_0..T_{order-1}` and their `tau` derivatives at `tau`.
fn chebyshev(order: usize, tau: f64) -> (Vec<f64>, Vec<f64>) {
    let mut t = vec![0.0; order];
    let mut dt = vec![0.0; order];
    t[0] = 1.0;
    if order > 1 {
        t[1] = tau;
        dt[1] = 1.0;
    }
    for k in 1..order.saturating_sub(1) {
        t[k + 1] = 2.0 * tau * t[k] - t[k - 1];
        dt[k + 1] = 2.0 * t[k] + 2.0 * tau * dt[k] - dt[k - 1];
    }
    (t, dt)
}

/// Chebyshev-Gauss-Lobatto nodes on `[0, 1]` with Clenshaw-Curtis weights.
pub fn clenshaw_curtis(order: usize) -> (Vec<f64>, Vec<f64>) {
    let k_max = order;
    let kf = k_max as f64;
    let pi = std::f64::consts::PI;
    let mut nodes = Vec::with_capacity(k_max + 1);
    let mut weights = Vec::with_capacity(k_max + 1);
    for k in 0..=k_max {
        let theta = k as f64 * pi / kf;
        nodes.push(0.5 * (1.0 - theta.cos()));
        let c = if k == 0 || k == k_max { 1.0 } else { 2.0 };
        let mut sum = 0.0;
        for j in 1..=k_max / 2 {
            let b = if 2 * j == k_max { 1.0 } else { 2.0 };
            let jf = j as f64;
            sum += b / (4.0 * jf * jf - 1.0) * (2.0 * jf * theta).cos();
        }
        // halved: the interval is [0, 1]
        weights.push(0.5 * c / kf * (1.0 - sum));
    }
    (nodes, weights)
}

/// A discretized geodesic with its cached energy and endpoint tangents.
#[derive(Debug, Clone, PartialEq)]
pub struct GeodesicCurve {
    pub basis_order: usize,
    /// Full `n x basis_order` Chebyshev coefficient table.
    pub coeffs: DMatrix<f64>,
    pub x_star: DVector<f64>,
    pub x: DVector<f64>,
    pub energy: f64,
    pub gamma_s0: DVector<f64>,
    pub gamma_s1: DVector<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub grad_norm: f64,
}

impl GeodesicCurve {
    pub fn point(&self, s: f64) -> DVector<f64> {
        let (t, _) = chebyshev(self.basis_order, 2.0 * s - 1.0);
        &self.coeffs * DVector::from_vec(t)
    }

    pub fn tangent(&self, s: f64) -> DVector<f64> {
        let (_, dt) = chebyshev(self.basis_order, 2.0 * s - 1.0);
        &self.coeffs * DVector::from_vec(dt) * 2.0
    }

    /// Riemannian energy of this curve under a given quadrature order.
    pub fn energy_with_quadrature(&self, metric: &MetricPolynomial, order: usize) -> Result<f64, MetricError> {
        let (nodes, weights) = clenshaw_curtis(order);
        let mut e = 0.0;
        for (s, w) in nodes.iter().zip(&weights) {
            let g = self.tangent(*s);
            let m = metric.eval_m(&self.point(*s))?;
            e += w * g.dot(&(m * &g));
        }
        Ok(e)
    }

    /// Euclidean length of the curve, by the same quadrature.
    pub fn euclidean_length(&self, order: usize) -> f64 {
        let (nodes, weights) = clenshaw_curtis(order);
        nodes.iter().zip(&weights).map(|(s, w)| w * self.tangent(*s).norm()).sum()
    }
}

/// Geodesic solver with precomputed basis tables. Holds no per-problem state
/// besides those tables, but is not meant to be shared across threads.
#[derive(Debug, Clone)]
pub struct GeodesicSolver {
    cfg: GeodesicSolverConfig,
    nodes: Vec<f64>,
    weights: Vec<f64>,
    /// Values / s-derivatives of the free basis at the nodes (`Q x nf`).
    free_val: DMatrix<f64>,
    free_der: DMatrix<f64>,
    /// Values / s-derivatives of the endpoint blending functions (`Q x 2`,
    /// columns: x*, x).
    end_val: DMatrix<f64>,
    end_der: DMatrix<f64>,
}

struct Evaluated {
    energy: f64,
    grad: DMatrix<f64>,
    /// Exact Hessian of the discretized energy.
    hess: DMatrix<f64>,
    /// Gauss-Newton part only, positive definite.
    hess_gn: DMatrix<f64>,
}

impl GeodesicSolver {
    pub fn new(cfg: GeodesicSolverConfig) -> Result<Self, GeodesicError> {
        cfg.validate()?;
        let big_n = cfg.basis_order;
        let nf = big_n - 2;
        let (nodes, weights) = clenshaw_curtis(cfg.quadrature_order);
        let q = nodes.len();
        let e = if big_n.is_multiple_of(2) { 1.0 } else { -1.0 };
        let mut free_val = DMatrix::zeros(q, nf);
        let mut free_der = DMatrix::zeros(q, nf);
        let mut end_val = DMatrix::zeros(q, 2);
        let mut end_der = DMatrix::zeros(q, 2);
        for (r, &s) in nodes.iter().enumerate() {
            let (t, dt) = chebyshev(big_n, 2.0 * s - 1.0);
            let (ta, tb, da, db) = (t[big_n - 2], t[big_n - 1], dt[big_n - 2], dt[big_n - 1]);
            for j in 0..nf {
                let sign = if j % 2 == 0 { 1.0 } else { -1.0 };
                let a = 0.5 * (1.0 + e * sign);
                let b = 0.5 * (1.0 - e * sign);
                free_val[(r, j)] = t[j] - a * ta - b * tb;
                free_der[(r, j)] = 2.0 * (dt[j] - a * da - b * db);
            }
            end_val[(r, 0)] = 0.5 * e * (ta - tb);
            end_val[(r, 1)] = 0.5 * (ta + tb);
            end_der[(r, 0)] = e * (da - db);
            end_der[(r, 1)] = da + db;
        }
        Ok(Self {
            cfg,
            nodes,
            weights,
            free_val,
            free_der,
            end_val,
            end_der,
        })
    }

    pub fn config(&self) -> &GeodesicSolverConfig {
        &self.cfg
    }

    pub fn free_count(&self) -> usize {
        self.cfg.basis_order - 2
    }

    /// Free coefficients (`n x nf`) of the straight segment from `x_star` to `x`.
    pub fn straight_line(&self, x_star: &DVector<f64>, x: &DVector<f64>) -> DMatrix<f64> {
        let mut c = DMatrix::zeros(x.len(), self.free_count());
        c.set_column(0, &((x_star + x) * 0.5));
        c.set_column(1, &((x - x_star) * 0.5));
        c
    }

    fn ends(x_star: &DVector<f64>, x: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::from_columns(&[x_star.clone(), x.clone()])
    }

    /// Points and tangents at the quadrature nodes, each `n x Q`.
    fn curve_at_nodes(&self, ends: &DMatrix<f64>, free: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
        let pts = ends * self.end_val.transpose() + free * self.free_val.transpose();
        let tan = ends * self.end_der.transpose() + free * self.free_der.transpose();
        (pts, tan)
    }

    /// Discretized energy at the given free coefficients.
    pub fn energy(
        &self,
        metric: &MetricPolynomial,
        x_star: &DVector<f64>,
        x: &DVector<f64>,
        free: &DMatrix<f64>,
    ) -> Result<f64, MetricError> {
        let (pts, tan) = self.curve_at_nodes(&Self::ends(x_star, x), free);
        let mut e = 0.0;
        for q in 0..self.nodes.len() {
            let m = metric.eval_m(&pts.column(q).into_owned())?;
            let g = tan.column(q);
            e += self.weights[q] * g.dot(&(m * g));
        }
        Ok(e)
    }

    /// Discretized energy and its gradient with respect to the free coefficients.
    pub fn energy_and_gradient(
        &self,
        metric: &MetricPolynomial,
        x_star: &DVector<f64>,
        x: &DVector<f64>,
        free: &DMatrix<f64>,
    ) -> Result<(f64, DMatrix<f64>), MetricError> {
        let ev = self.evaluate(metric, &Self::ends(x_star, x), free, false)?;
        Ok((ev.energy, ev.grad))
    }

    fn evaluate(
        &self,
        metric: &MetricPolynomial,
        ends: &DMatrix<f64>,
        free: &DMatrix<f64>,
        with_hessian: bool,
    ) -> Result<Evaluated, MetricError> {
        let n = free.nrows();
        let nf = free.ncols();
        let (pts, tan) = self.curve_at_nodes(ends, free);
        let mut energy = 0.0;
        let mut grad = DMatrix::zeros(n, nf);
        let mut hess = if with_hessian {
            DMatrix::zeros(n * nf, n * nf)
        } else {
            DMatrix::zeros(0, 0)
        };
        let mut hess_gn = hess.clone();
        for q in 0..self.nodes.len() {
            let wq = self.weights[q];
            let x = pts.column(q).into_owned();
            let ev = metric.eval_m_and_derivs(&x)?;
            let g = tan.column(q).into_owned();
            let v = &ev.m * &g;
            energy += wq * g.dot(&v);
            // d/dc_ij: 2 phi'_j (M g)_i  -  phi_j v^T dW/dx_i v
            let curv: Vec<(usize, f64)> = ev.dw.iter().map(|(k, d)| (*k, v.dot(&(d * &v)))).collect();
            for j in 0..nf {
                let dj = self.free_der[(q, j)];
                let pj = self.free_val[(q, j)];
                for i in 0..n {
                    grad[(i, j)] += wq * 2.0 * dj * v[i];
                }
                for (k, c) in &curv {
                    grad[(*k, j)] -= wq * pj * c;
                }
            }
            if !with_hessian {
                continue;
            }
            // u_k = dW/dx_k v,  a_k = M u_k = -(dM/dx_k) g
            let u: Vec<(usize, DVector<f64>)> = ev.dw.iter().map(|(k, d)| (*k, d * &v)).collect();
            let a: Vec<(usize, DVector<f64>)> = u.iter().map(|(k, uk)| (*k, &ev.m * uk)).collect();
            let second = metric.eval_w_second_partials(&x);
            for j in 0..nf {
                for l in 0..nf {
                    let (dj, dl) = (self.free_der[(q, j)], self.free_der[(q, l)]);
                    let (pj, pl) = (self.free_val[(q, j)], self.free_val[(q, l)]);
                    let s = 2.0 * wq * dj * dl;
                    for i in 0..n {
                        for k in 0..n {
                            hess_gn[(j * n + i, l * n + k)] += s * ev.m[(i, k)];
                        }
                    }
                    for (k, ak) in &a {
                        for i in 0..n {
                            hess[(j * n + i, l * n + k)] -= 2.0 * wq * dj * pl * ak[i];
                            hess[(l * n + k, j * n + i)] -= 2.0 * wq * dj * pl * ak[i];
                        }
                    }
                    for (ia, (i, ui)) in u.iter().enumerate() {
                        for (k, uk) in &u[ia..] {
                            let d2 = &second
                                .iter()
                                .find(|(p, r, _)| (p, r) == (i, k) || (p, r) == (k, i))
                                .expect("second partial present")
                                .2;
                            let val = wq * pj * pl * (2.0 * ui.dot(&(&ev.m * uk)) - v.dot(&(d2 * &v)));
                            hess[(j * n + i, l * n + k)] += val;
                            if i != k {
                                hess[(j * n + k, l * n + i)] += val;
                            }
                        }
                    }
                }
            }
        }
        if with_hessian {
            hess += &hess_gn;
        }
        Ok(Evaluated { energy, grad, hess, hess_gn })
    }

    fn finish(
        &self,
        metric: &MetricPolynomial,
        x_star: &DVector<f64>,
        x: &DVector<f64>,
        free: &DMatrix<f64>,
        energy: f64,
        iterations: usize,
        converged: bool,
        grad_norm: f64,
    ) -> GeodesicCurve {
        let big_n = self.cfg.basis_order;
        let nf = big_n - 2;
        let n = x.len();
        let e = if big_n.is_multiple_of(2) { 1.0 } else { -1.0 };
        let mut coeffs = DMatrix::zeros(n, big_n);
        coeffs.view_mut((0, 0), (n, nf)).copy_from(free);
        let mut hi_a = x_star * (0.5 * e) + x * 0.5;
        let mut hi_b = x_star * (-0.5 * e) + x * 0.5;
        for j in 0..nf {
            let sign = if j % 2 == 0 { 1.0 } else { -1.0 };
            let a = 0.5 * (1.0 + e * sign);
            let b = 0.5 * (1.0 - e * sign);
            hi_a -= free.column(j) * a;
            hi_b -= free.column(j) * b;
        }
        coeffs.set_column(big_n - 2, &hi_a);
        coeffs.set_column(big_n - 1, &hi_b);
        // T_k'(1) = k^2, T_k'(-1) = (-1)^(k+1) k^2; d/ds = 2 d/dtau
        let mut g0 = DVector::zeros(n);
        let mut g1 = DVector::zeros(n);
        for k in 1..big_n {
            let k2 = (k * k) as f64;
            let sign = if k % 2 == 1 { 1.0 } else { -1.0 };
            g1 += coeffs.column(k) * (2.0 * k2);
            g0 += coeffs.column(k) * (2.0 * k2 * sign);
        }
        let _ = metric;
        GeodesicCurve {
            basis_order: big_n,
            coeffs,
            x_star: x_star.clone(),
            x: x.clone(),
            energy,
            gamma_s0: g0,
            gamma_s1: g1,
            iterations,
            converged,
            grad_norm,
        }
    }

    /// Free coefficients of a previous solution shifted to new endpoints.
    fn shifted_warm_start(&self, prev: &GeodesicCurve, x_star: &DVector<f64>, x: &DVector<f64>) -> Option<DMatrix<f64>> {
        if prev.basis_order != self.cfg.basis_order || prev.x.len() != x.len() {
            return None;
        }
        let nf = self.free_count();
        let mut free = prev.coeffs.columns(0, nf).into_owned();
        free += self.straight_line(x_star, x) - self.straight_line(&prev.x_star, &prev.x);
        Some(free)
    }

    /// Minimizes the discretized energy between `x_star` (s = 0) and `x` (s = 1).
    ///
    /// Non-convergence within `max_iters` is not an error: the best iterate is
    /// returned with `converged == false`.
    pub fn solve(
        &self,
        metric: &MetricPolynomial,
        x_star: &DVector<f64>,
        x: &DVector<f64>,
        warm_start: Option<&GeodesicCurve>,
    ) -> Result<GeodesicCurve, GeodesicError> {
        let n = metric.state_dim();
        if x.len() != n || x_star.len() != n {
            return Err(GeodesicError::Dimension { metric: n, state: x.len() });
        }
        if x == x_star {
            let free = self.straight_line(x_star, x);
            let mut c = self.finish(metric, x_star, x, &free, 0.0, 0, true, 0.0);
            c.gamma_s0.fill(0.0);
            c.gamma_s1.fill(0.0);
            return Ok(c);
        }
        let ends = Self::ends(x_star, x);
        let mut free = self.straight_line(x_star, x);
        if let Some(prev) = warm_start {
            if let Some(w) = self.shifted_warm_start(prev, x_star, x) {
                if let (Ok(ew), Ok(es)) = (self.energy(metric, x_star, x, &w), self.energy(metric, x_star, x, &free)) {
                    if ew <= es {
                        free = w;
                    }
                }
            }
        }
        let mut ev = self.evaluate(metric, &ends, &free, false)?;
        let nf = self.free_count();
        let mut iterations = 0;
        loop {
            let gnorm = ev.grad.amax();
            if gnorm <= self.cfg.grad_tol {
                return Ok(self.finish(metric, x_star, x, &free, ev.energy, iterations, true, gnorm));
            }
            if iterations >= self.cfg.max_iters {
                log::warn!("geodesic solve stopped at {iterations} iterations, |grad| = {gnorm:e}");
                return Ok(self.finish(metric, x_star, x, &free, ev.energy, iterations, false, gnorm));
            }
            iterations += 1;
            ev = self.evaluate(metric, &ends, &free, true)?;
            // Newton direction, falling back to Gauss-Newton away from a
            // minimum; vectorized column-major over (i, j)
            let g = DVector::from_column_slice(ev.grad.as_slice());
            let step = match ev.hess.clone().cholesky() {
                Some(ch) => -ch.solve(&g),
                None => match ev.hess_gn.clone().cholesky() {
                    Some(ch) => -ch.solve(&g),
                    None => -&g,
                },
            };
            let step = if g.dot(&step) < 0.0 { step } else { -g.clone() };
            let slope = g.dot(&step);
            let dir = DMatrix::from_column_slice(n, nf, step.as_slice());
            let mut t = 1.0;
            let mut accepted = None;
            for _ in 0..40 {
                let cand = &free + &dir * t;
                if let Ok(e) = self.energy(metric, x_star, x, &cand) {
                    if e <= ev.energy + 1e-4 * t * slope {
                        accepted = Some(cand);
                        break;
                    }
                    // at the round-off floor of E a full step is judged by the gradient
                    if t == 1.0 && e <= ev.energy + 1e-13 * (1.0 + ev.energy) {
                        let cev = self.evaluate(metric, &ends, &cand, false)?;
                        if cev.grad.amax() < 0.5 * gnorm {
                            accepted = Some(cand);
                            break;
                        }
                    }
                }
                t *= 0.5;
            }
            match accepted {
                Some(cand) => {
                    free = cand;
                    ev = self.evaluate(metric, &ends, &free, false)?;
                }
                None => {
                    log::warn!("geodesic line search stalled at |grad| = {gnorm:e}");
                    return Ok(self.finish(metric, x_star, x, &free, ev.energy, iterations, false, gnorm));
                }
            }
        }
    }
}

/// `alpha1 |x - x*|^2`, a floor for the Riemannian energy.
pub fn energy_lower_bound(metric: &MetricPolynomial, x_star: &DVector<f64>, x: &DVector<f64>) -> f64 {
    metric.alpha1 * (x - x_star).norm_squared()
}

/// The two products entering the first variation of energy:
/// `(gamma_s(1)^T M(x), gamma_s(0)^T M(x*))`, both as column vectors.
pub fn first_variation_terms(
    curve: &GeodesicCurve,
    metric: &MetricPolynomial,
    x_star: &DVector<f64>,
    x: &DVector<f64>,
) -> Result<(DVector<f64>, DVector<f64>), GeodesicError> {
    let scale = 1.0 + x.amax().max(x_star.amax());
    if (&curve.x - x).amax() > 1e-9 * scale || (&curve.x_star - x_star).amax() > 1e-9 * scale {
        return Err(GeodesicError::EndpointMismatch);
    }
    let m1 = metric.eval_m(x)?;
    let m0 = metric.eval_m(x_star)?;
    Ok((m1 * &curve.gamma_s1, m0 * &curve.gamma_s0))
}
