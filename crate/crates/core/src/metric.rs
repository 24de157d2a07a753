//! Polynomial dual metric `W(x)`, the contraction metric `M = W^{-1}`, and
//! grid verification of the dual CCM conditions.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{annihilator, SystemModel};

pub const METRIC_FORMAT: &str = "rccm-metric/1";

/// Dual metric shipped for the planar quadrotor, polynomial in `(phi, v_x)`.
pub const QUADROTOR_METRIC_TOML: &str = include_str!("../data/quadrotor_metric.toml");

pub fn quadrotor_metric() -> MetricPolynomial {
    let file: MetricFile = toml::from_str(QUADROTOR_METRIC_TOML).expect("bundled metric parses");
    MetricPolynomial::from_file(&file).expect("bundled metric is valid")
}

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("W(x) is not positive definite at x = {x:?}")]
    NotPositiveDefinite { x: Vec<f64> },
    #[error("metric coefficients are not symmetric at entry ({row}, {col})")]
    Asymmetric { row: usize, col: usize },
    #[error("invalid metric: {0}")]
    Invalid(String),
    #[error("verification grid is empty")]
    EmptyGrid,
    #[error("unsupported metric format {0:?}")]
    Format(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse error: {0}")]
    Parse(String),
}

/// Symmetric-matrix-valued polynomial in a subset of the state coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricPolynomial {
    state_dim: usize,
    state_names: Vec<String>,
    depends_on: Vec<usize>,
    /// Exponent tuples over `depends_on`.
    monomials: Vec<Vec<u32>>,
    /// One symmetric coefficient matrix per monomial.
    coeffs: Vec<DMatrix<f64>>,
    pub lambda: f64,
    pub alpha1: f64,
    pub alpha2: f64,
}

/// `W`, `M = W^{-1}` and `dW/dx_k` for each coordinate in `depends_on`, at one state.
#[derive(Debug, Clone)]
pub struct MetricEval {
    pub w: DMatrix<f64>,
    pub m: DMatrix<f64>,
    pub dw: Vec<(usize, DMatrix<f64>)>,
}

impl MetricEval {
    /// Directional derivative `sum_k v_k dW/dx_k`.
    pub fn directional(&self, v: &DVector<f64>) -> DMatrix<f64> {
        let n = self.w.nrows();
        let mut out = DMatrix::zeros(n, n);
        for (k, d) in &self.dw {
            out += d * v[*k];
        }
        out
    }

    /// `dW/dx_k`, zero for coordinates the metric does not depend on.
    pub fn partial(&self, k: usize) -> DMatrix<f64> {
        self.dw
            .iter()
            .find(|(i, _)| *i == k)
            .map(|(_, d)| d.clone())
            .unwrap_or_else(|| DMatrix::zeros(self.w.nrows(), self.w.ncols()))
    }
}

impl MetricPolynomial {
    pub fn new(
        state_names: Vec<String>,
        depends_on: Vec<usize>,
        monomials: Vec<Vec<u32>>,
        coeffs: Vec<DMatrix<f64>>,
        lambda: f64,
        alpha1: f64,
        alpha2: f64,
    ) -> Result<Self, MetricError> {
        let n = state_names.len();
        if n == 0 {
            return Err(MetricError::Invalid("empty state".into()));
        }
        if monomials.len() != coeffs.len() {
            return Err(MetricError::Invalid("one coefficient matrix per monomial".into()));
        }
        if depends_on.iter().any(|&k| k >= n) {
            return Err(MetricError::Invalid("depends_on index out of range".into()));
        }
        for (mono, c) in monomials.iter().zip(&coeffs) {
            if mono.len() != depends_on.len() {
                return Err(MetricError::Invalid("monomial arity mismatch".into()));
            }
            if c.nrows() != n || c.ncols() != n {
                return Err(MetricError::Invalid("coefficient matrix shape".into()));
            }
            for i in 0..n {
                for j in 0..i {
                    if c[(i, j)] != c[(j, i)] {
                        return Err(MetricError::Asymmetric { row: i, col: j });
                    }
                }
            }
        }
        if !(lambda > 0.0) || !(alpha1 > 0.0) || !(alpha2 >= alpha1) {
            return Err(MetricError::Invalid(format!(
                "need lambda > 0 and 0 < alpha1 <= alpha2 (got {lambda}, {alpha1}, {alpha2})"
            )));
        }
        Ok(Self {
            state_dim: n,
            state_names,
            depends_on,
            monomials,
            coeffs,
            lambda,
            alpha1,
            alpha2,
        })
    }

    /// Degree-0 metric `W(x) = W0`.
    pub fn constant(w0: DMatrix<f64>, lambda: f64) -> Result<Self, MetricError> {
        let n = w0.nrows();
        let eig = w0.clone().symmetric_eigen().eigenvalues;
        let (lo, hi) = (eig.min(), eig.max());
        if !(lo > 0.0) {
            return Err(MetricError::NotPositiveDefinite { x: vec![] });
        }
        Self::new(
            (0..n).map(|i| format!("x{i}")).collect(),
            Vec::new(),
            vec![Vec::new()],
            vec![w0],
            lambda,
            1.0 / hi,
            1.0 / lo,
        )
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn depends_on(&self) -> &[usize] {
        &self.depends_on
    }

    pub fn state_names(&self) -> &[String] {
        &self.state_names
    }

    pub fn degree(&self) -> u32 {
        self.monomials.iter().map(|m| m.iter().sum::<u32>()).max().unwrap_or(0)
    }

    pub fn monomials(&self) -> &[Vec<u32>] {
        &self.monomials
    }

    pub fn coefficient_matrices(&self) -> &[DMatrix<f64>] {
        &self.coeffs
    }

    /// Same metric with a different contraction rate.
    pub fn with_lambda(&self, lambda: f64) -> Self {
        Self { lambda, ..self.clone() }
    }

    fn power_table(&self, x: &DVector<f64>) -> Vec<Vec<f64>> {
        let deg = self.degree() as usize;
        self.depends_on
            .iter()
            .map(|&k| {
                let mut p = Vec::with_capacity(deg + 1);
                let mut acc = 1.0;
                for _ in 0..=deg {
                    p.push(acc);
                    acc *= x[k];
                }
                p
            })
            .collect()
    }

    pub fn eval_w(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let pw = self.power_table(x);
        let n = self.state_dim;
        let mut w = DMatrix::zeros(n, n);
        for (mono, c) in self.monomials.iter().zip(&self.coeffs) {
            let v: f64 = mono.iter().enumerate().map(|(j, &e)| pw[j][e as usize]).product();
            w += c * v;
        }
        w
    }

    /// `dW/dx_k` for every coordinate in `depends_on`.
    pub fn eval_w_partials(&self, x: &DVector<f64>) -> Vec<(usize, DMatrix<f64>)> {
        let pw = self.power_table(x);
        let n = self.state_dim;
        self.depends_on
            .iter()
            .enumerate()
            .map(|(j, &k)| {
                let mut d = DMatrix::zeros(n, n);
                for (mono, c) in self.monomials.iter().zip(&self.coeffs) {
                    let e = mono[j];
                    if e == 0 {
                        continue;
                    }
                    let v: f64 = mono
                        .iter()
                        .enumerate()
                        .map(|(i, &ei)| if i == j { e as f64 * pw[i][(ei - 1) as usize] } else { pw[i][ei as usize] })
                        .product();
                    d += c * v;
                }
                (k, d)
            })
            .collect()
    }

    /// `d^2 W / dx_a dx_b` for `a <= b` in `depends_on`, as `(a, b, matrix)`.
    pub fn eval_w_second_partials(&self, x: &DVector<f64>) -> Vec<(usize, usize, DMatrix<f64>)> {
        let pw = self.power_table(x);
        let n = self.state_dim;
        let nd = self.depends_on.len();
        let mut out = Vec::with_capacity(nd * (nd + 1) / 2);
        for ja in 0..nd {
            for jb in ja..nd {
                let mut d = DMatrix::zeros(n, n);
                for (mono, c) in self.monomials.iter().zip(&self.coeffs) {
                    let mut order = vec![0u32; nd];
                    order[ja] += 1;
                    order[jb] += 1;
                    let mut v = 1.0;
                    for i in 0..nd {
                        let (e, o) = (mono[i], order[i]);
                        if e < o {
                            v = 0.0;
                            break;
                        }
                        let falling: u32 = (0..o).map(|r| e - r).product();
                        v *= falling as f64 * pw[i][(e - o) as usize];
                    }
                    if v != 0.0 {
                        d += c * v;
                    }
                }
                out.push((self.depends_on[ja], self.depends_on[jb], d));
            }
        }
        out
    }

    /// `M = W^{-1}` via Cholesky, plus the partials of `W`.
    pub fn eval_m_and_derivs(&self, x: &DVector<f64>) -> Result<MetricEval, MetricError> {
        let w = self.eval_w(x);
        let m = spd_inverse(&w).ok_or_else(|| MetricError::NotPositiveDefinite {
            x: x.iter().copied().collect(),
        })?;
        Ok(MetricEval {
            w,
            m,
            dw: self.eval_w_partials(x),
        })
    }

    pub fn eval_m(&self, x: &DVector<f64>) -> Result<DMatrix<f64>, MetricError> {
        spd_inverse(&self.eval_w(x)).ok_or_else(|| MetricError::NotPositiveDefinite {
            x: x.iter().copied().collect(),
        })
    }

    /// Overshoot constant `sqrt(alpha2 / alpha1)`.
    pub fn overshoot(&self) -> f64 {
        (self.alpha2 / self.alpha1).sqrt()
    }

    pub fn to_file(&self) -> MetricFile {
        let n = self.state_dim;
        let mut entries = Vec::new();
        for i in 0..n {
            for j in i..n {
                let terms: Vec<MetricTerm> = self
                    .monomials
                    .iter()
                    .zip(&self.coeffs)
                    .filter(|(_, c)| c[(i, j)] != 0.0)
                    .map(|(mono, c)| MetricTerm {
                        exponents: mono.clone(),
                        coeff: c[(i, j)],
                    })
                    .collect();
                if !terms.is_empty() {
                    entries.push(MetricEntry { row: i, col: j, terms });
                }
            }
        }
        MetricFile {
            format: METRIC_FORMAT.to_string(),
            state_names: self.state_names.clone(),
            depends_on: self.depends_on.iter().map(|&k| self.state_names[k].clone()).collect(),
            lambda: self.lambda,
            alpha1: self.alpha1,
            alpha2: self.alpha2,
            entries,
        }
    }

    pub fn from_file(file: &MetricFile) -> Result<Self, MetricError> {
        if file.format != METRIC_FORMAT {
            return Err(MetricError::Format(file.format.clone()));
        }
        let n = file.state_names.len();
        let depends_on = file
            .depends_on
            .iter()
            .map(|name| {
                file.state_names
                    .iter()
                    .position(|s| s == name)
                    .ok_or_else(|| MetricError::Invalid(format!("unknown coordinate {name:?}")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let mut monomials: Vec<Vec<u32>> = Vec::new();
        let mut coeffs: Vec<DMatrix<f64>> = Vec::new();
        let mut seen = vec![vec![false; n]; n];
        for e in &file.entries {
            if e.row >= n || e.col >= n {
                return Err(MetricError::Invalid(format!("entry ({}, {}) out of range", e.row, e.col)));
            }
            for t in &e.terms {
                if t.exponents.len() != depends_on.len() {
                    return Err(MetricError::Invalid("monomial arity mismatch".into()));
                }
                let idx = match monomials.iter().position(|m| *m == t.exponents) {
                    Some(i) => i,
                    None => {
                        monomials.push(t.exponents.clone());
                        coeffs.push(DMatrix::zeros(n, n));
                        monomials.len() - 1
                    }
                };
                let c = &mut coeffs[idx];
                if seen[e.col][e.row] && e.row != e.col {
                    // both triangles listed: they have to agree
                    if c[(e.row, e.col)] != t.coeff {
                        return Err(MetricError::Asymmetric { row: e.row, col: e.col });
                    }
                }
                c[(e.row, e.col)] = t.coeff;
                c[(e.col, e.row)] = t.coeff;
            }
            seen[e.row][e.col] = true;
        }
        if monomials.is_empty() {
            monomials.push(vec![0; depends_on.len()]);
            coeffs.push(DMatrix::zeros(n, n));
        }
        Self::new(
            file.state_names.clone(),
            depends_on,
            monomials,
            coeffs,
            file.lambda,
            file.alpha1,
            file.alpha2,
        )
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, MetricError> {
        let text = std::fs::read_to_string(path)?;
        let file: MetricFile = toml::from_str(&text).map_err(|e| MetricError::Parse(e.to_string()))?;
        Self::from_file(&file)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), MetricError> {
        let text = toml::to_string(&self.to_file()).map_err(|e| MetricError::Parse(e.to_string()))?;
        std::fs::write(path, text)?;
        Ok(())
    }
}

/// Inverse of a symmetric positive definite matrix, `None` if Cholesky fails.
pub fn spd_inverse(w: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let chol = w.clone().cholesky()?;
    let mut m = chol.inverse();
    // symmetrize away round-off
    let mt = m.transpose();
    m += mt;
    m *= 0.5;
    Some(m)
}

/// On-disk representation of a [`MetricPolynomial`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricFile {
    pub format: String,
    pub state_names: Vec<String>,
    pub depends_on: Vec<String>,
    pub lambda: f64,
    pub alpha1: f64,
    pub alpha2: f64,
    #[serde(rename = "entry", default)]
    pub entries: Vec<MetricEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricEntry {
    pub row: usize,
    pub col: usize,
    pub terms: Vec<MetricTerm>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricTerm {
    pub exponents: Vec<u32>,
    pub coeff: f64,
}

/// One gridded coordinate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridAxis {
    pub coord: usize,
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

/// Tensor grid over some state coordinates; the others are held at `base`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub axes: Vec<GridAxis>,
    pub base: Vec<f64>,
}

impl GridSpec {
    /// Grid the listed coordinates of the model's state box with `count`
    /// points each; remaining coordinates sit at the box midpoint.
    pub fn over_state_box(model: &SystemModel, coords: &[usize], count: usize) -> Self {
        let base = model.x_box.bounds.iter().map(|b| 0.5 * (b.lo + b.hi)).collect();
        let axes = coords
            .iter()
            .map(|&k| GridAxis {
                coord: k,
                lo: model.x_box.bounds[k].lo,
                hi: model.x_box.bounds[k].hi,
                count,
            })
            .collect();
        Self { axes, base }
    }

    pub fn len(&self) -> usize {
        if self.axes.is_empty() {
            0
        } else {
            self.axes.iter().map(|a| a.count).product()
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn points(&self) -> Vec<DVector<f64>> {
        let bounds = self
            .axes
            .iter()
            .map(|a| crate::dynamics::Interval::new(a.lo, a.hi))
            .collect();
        let counts: Vec<usize> = self.axes.iter().map(|a| a.count).collect();
        crate::dynamics::BoxSet::new(bounds)
            .grid(&counts)
            .into_iter()
            .map(|p| {
                let mut x = DVector::from_column_slice(&self.base);
                for (a, v) in self.axes.iter().zip(p.iter()) {
                    x[a.coord] = *v;
                }
                x
            })
            .collect()
    }
}

/// Worst-case margins of the dual CCM conditions over a grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CcmVerificationReport {
    pub grid: GridSpec,
    pub points_checked: usize,
    pub lambda: f64,
    /// Largest eigenvalue of the projected contraction block; `<= 0` passes.
    pub worst_contraction_margin: f64,
    pub worst_contraction_point: Vec<f64>,
    /// Largest Frobenius norm of the Killing residual over all input columns.
    pub worst_killing_residual: f64,
    /// `(min eig M, max eig M)` seen on the grid.
    pub alpha_bounds_found: (f64, f64),
    pub min_w_eigenvalue: f64,
}

impl CcmVerificationReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.worst_contraction_margin <= tol && self.worst_killing_residual <= tol
    }

    /// Stored metric bounds contain every eigenvalue of `M` found on the grid.
    pub fn alpha_consistent(&self, metric: &MetricPolynomial, rel: f64) -> bool {
        self.alpha_bounds_found.0 >= metric.alpha1 * (1.0 - rel)
            && self.alpha_bounds_found.1 <= metric.alpha2 * (1.0 + rel)
    }
}

struct PointCheck {
    contraction: f64,
    killing: f64,
    w_min: f64,
    w_max: f64,
}

fn sym(a: &DMatrix<f64>) -> DMatrix<f64> {
    a + a.transpose()
}

fn check_point(
    metric: &MetricPolynomial,
    model: &SystemModel,
    x: &DVector<f64>,
    b_perp: Option<&DMatrix<f64>>,
) -> Result<PointCheck, MetricError> {
    let ev = metric.eval_m_and_derivs(x)?;
    let w = &ev.w;
    let a = model.drift_jacobian(x);
    let f = model.drift(x);
    let b = model.input_matrix(x);
    let owned;
    let perp = match b_perp {
        Some(p) => p,
        None => {
            owned = annihilator(&b);
            &owned
        }
    };
    let block = sym(&(&a * w)) - ev.directional(&f) + w * (2.0 * metric.lambda);
    let proj = perp.transpose() * block * perp;
    let proj = (&proj + proj.transpose()) * 0.5;
    let contraction = if proj.nrows() == 0 {
        f64::NEG_INFINITY
    } else {
        proj.symmetric_eigen().eigenvalues.max()
    };
    let mut killing = 0.0f64;
    for i in 0..b.ncols() {
        let dbi = model.input_column_jacobian(x, i);
        let col = b.column(i).into_owned();
        let resid = sym(&(dbi * w)) - ev.directional(&col);
        killing = killing.max(resid.norm());
    }
    let weig = w.clone().symmetric_eigen().eigenvalues;
    Ok(PointCheck {
        contraction,
        killing,
        w_min: weig.min(),
        w_max: weig.max(),
    })
}

/// Evaluates `B_perp^T (<df/dx W> - d_f W + 2 lambda W) B_perp` and the
/// Killing residuals `<db_i/dx W> - d_{b_i} W` at every grid point.
pub fn verify_dual_ccm(
    metric: &MetricPolynomial,
    model: &SystemModel,
    grid: &GridSpec,
) -> Result<CcmVerificationReport, MetricError> {
    if grid.is_empty() {
        return Err(MetricError::EmptyGrid);
    }
    if metric.state_dim() != model.state_dim() || grid.base.len() != model.state_dim() {
        return Err(MetricError::Invalid("metric/model/grid dimension mismatch".into()));
    }
    let points = grid.points();
    let cached_perp = if model.input_matrix_is_constant() {
        Some(annihilator(&model.input_matrix(&points[0])))
    } else {
        None
    };
    let checks: Vec<Result<PointCheck, MetricError>> = points
        .par_iter()
        .map(|x| check_point(metric, model, x, cached_perp.as_ref()))
        .collect();
    let mut worst_c = f64::NEG_INFINITY;
    let mut worst_pt = points[0].clone();
    let mut worst_k = 0.0f64;
    let mut w_min = f64::INFINITY;
    let mut w_max = 0.0f64;
    for (x, c) in points.iter().zip(checks) {
        let c = c?;
        if c.contraction > worst_c {
            worst_c = c.contraction;
            worst_pt = x.clone();
        }
        worst_k = worst_k.max(c.killing);
        w_min = w_min.min(c.w_min);
        w_max = w_max.max(c.w_max);
    }
    Ok(CcmVerificationReport {
        grid: grid.clone(),
        points_checked: points.len(),
        lambda: metric.lambda,
        worst_contraction_margin: worst_c,
        worst_contraction_point: worst_pt.iter().copied().collect(),
        worst_killing_residual: worst_k,
        alpha_bounds_found: (1.0 / w_max, 1.0 / w_min),
        min_w_eigenvalue: w_min,
    })
}

/// Continuous algebraic Riccati solution via the matrix sign function of
/// the Hamiltonian.
fn care(a: &DMatrix<f64>, b: &DMatrix<f64>, q: &DMatrix<f64>, r: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let n = a.nrows();
    let rinv = r.clone().try_inverse()?;
    let g = b * rinv * b.transpose();
    let mut h = DMatrix::zeros(2 * n, 2 * n);
    h.view_mut((0, 0), (n, n)).copy_from(a);
    h.view_mut((0, n), (n, n)).copy_from(&(-&g));
    h.view_mut((n, 0), (n, n)).copy_from(&(-q));
    h.view_mut((n, n), (n, n)).copy_from(&(-a.transpose()));
    let mut z = h;
    for _ in 0..100 {
        let zi = z.clone().try_inverse()?;
        let det = z.determinant().abs();
        let c = det.powf(-1.0 / (2 * n) as f64);
        let next = (&z * c + zi / c) * 0.5;
        let delta = (&next - &z).norm() / next.norm();
        z = next;
        if delta < 1e-13 {
            break;
        }
    }
    let id = DMatrix::<f64>::identity(n, n);
    let mut lhs = DMatrix::zeros(2 * n, n);
    lhs.view_mut((0, 0), (n, n)).copy_from(&z.view((0, n), (n, n)));
    lhs.view_mut((n, 0), (n, n)).copy_from(&(z.view((n, n), (n, n)) + &id));
    let mut rhs = DMatrix::zeros(2 * n, n);
    rhs.view_mut((0, 0), (n, n)).copy_from(&(z.view((0, 0), (n, n)) + &id));
    rhs.view_mut((n, 0), (n, n)).copy_from(&z.view((n, 0), (n, n)));
    let p = -lhs.svd(true, true).solve(&rhs, 1e-12).ok()?;
    Some((&p + p.transpose()) * 0.5)
}

/// Constant metric from the LQR value function of the linearization at
/// `x_eq`. Only meant for bring-up: it is not a global CCM.
pub fn lqr_fallback_metric(model: &SystemModel, x_eq: &DVector<f64>, lambda: f64) -> Result<MetricPolynomial, MetricError> {
    let n = model.state_dim();
    let m = model.input_dim();
    let a = model.drift_jacobian(x_eq);
    let b = model.input_matrix(x_eq);
    let p = care(&a, &b, &DMatrix::identity(n, n), &DMatrix::identity(m, m))
        .ok_or_else(|| MetricError::Invalid("Riccati solve failed".into()))?;
    let w = spd_inverse(&p).ok_or(MetricError::NotPositiveDefinite { x: x_eq.iter().copied().collect() })?;
    let mut metric = MetricPolynomial::constant(w, lambda)?;
    metric.state_names = model.state_names();
    Ok(metric)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{quadrotor_model, QuadrotorParams};

    fn two_var_metric() -> MetricPolynomial {
        // W = I + phi^2 E11 + 0.1 phi v_x (E12 + E21)
        let n = 6;
        let mut c0 = DMatrix::identity(n, n);
        c0[(1, 1)] = 2.0;
        let mut c_phi2 = DMatrix::zeros(n, n);
        c_phi2[(0, 0)] = 1.0;
        let mut c_cross = DMatrix::zeros(n, n);
        c_cross[(0, 1)] = 0.1;
        c_cross[(1, 0)] = 0.1;
        MetricPolynomial::new(
            crate::dynamics::QUADROTOR_STATE_NAMES.iter().map(|s| s.to_string()).collect(),
            vec![2, 3],
            vec![vec![0, 0], vec![2, 0], vec![1, 1]],
            vec![c0, c_phi2, c_cross],
            0.8,
            0.1,
            1.0,
        )
        .unwrap()
    }

    #[test]
    fn constant_metric_evaluates_everywhere() {
        let w0 = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 2.0, 3.0]));
        let m = MetricPolynomial::constant(w0.clone(), 1.0).unwrap();
        assert_eq!(m.eval_w(&DVector::from_vec(vec![5.0, -3.0, 1e3])), w0);
        assert!((m.alpha1 - 1.0 / 3.0).abs() < 1e-15 && (m.alpha2 - 1.0).abs() < 1e-15);
    }

    #[test]
    fn inverse_identity_and_structural_zeros() {
        let metric = two_var_metric();
        let x = DVector::from_vec(vec![1.0, 2.0, 0.4, -1.3, 0.2, 0.1]);
        let ev = metric.eval_m_and_derivs(&x).unwrap();
        assert!((&ev.m * &ev.w - DMatrix::identity(6, 6)).amax() < 1e-10);
        for k in [0, 1, 4, 5] {
            assert_eq!(ev.partial(k).amax(), 0.0);
        }
    }

    #[test]
    fn not_positive_definite_is_reported() {
        let mut c = DMatrix::identity(2, 2);
        c[(1, 1)] = -1.0;
        let metric = MetricPolynomial::new(
            vec!["a".into(), "b".into()],
            vec![],
            vec![vec![]],
            vec![c],
            1.0,
            1.0,
            1.0,
        )
        .unwrap();
        assert!(matches!(
            metric.eval_m_and_derivs(&DVector::zeros(2)),
            Err(MetricError::NotPositiveDefinite { .. })
        ));
    }

    #[test]
    fn asymmetric_coefficients_are_rejected() {
        let mut c = DMatrix::identity(2, 2);
        c[(0, 1)] = 0.5;
        let err = MetricPolynomial::new(vec!["a".into(), "b".into()], vec![], vec![vec![]], vec![c], 1.0, 1.0, 1.0);
        assert!(matches!(err, Err(MetricError::Asymmetric { .. })));
    }

    #[test]
    fn file_round_trip() {
        let metric = two_var_metric();
        let text = toml::to_string(&metric.to_file()).unwrap();
        let back: MetricFile = toml::from_str(&text).unwrap();
        assert_eq!(MetricPolynomial::from_file(&back).unwrap(), metric);
        let mut bad = metric.to_file();
        bad.format = "rccm-metric/0".into();
        assert!(matches!(MetricPolynomial::from_file(&bad), Err(MetricError::Format(_))));
    }

    #[test]
    fn empty_grid_is_an_error() {
        let model = quadrotor_model(QuadrotorParams::default()).unwrap();
        let grid = GridSpec { axes: vec![], base: vec![0.0; 6] };
        assert!(matches!(verify_dual_ccm(&two_var_metric(), &model, &grid), Err(MetricError::EmptyGrid)));
    }

    #[test]
    fn killing_residual_vanishes_for_constant_b() {
        let model = quadrotor_model(QuadrotorParams::default()).unwrap();
        let grid = GridSpec::over_state_box(&model, &[2, 3, 4, 5], 3);
        let report = verify_dual_ccm(&two_var_metric(), &model, &grid).unwrap();
        assert_eq!(report.worst_killing_residual, 0.0);
        assert_eq!(report.points_checked, 81);
    }

    #[test]
    fn lqr_fallback_is_positive_definite() {
        let model = quadrotor_model(QuadrotorParams::default()).unwrap();
        let x_eq = DVector::from_vec(vec![5.0, 5.0, 0.0, 0.0, 0.0, 0.0]);
        let metric = lqr_fallback_metric(&model, &x_eq, 0.8).unwrap();
        let w = metric.eval_w(&x_eq);
        assert!(w.symmetric_eigen().eigenvalues.min() > 0.0);
        assert_eq!(metric.depends_on().len(), 0);
    }
}
