//! Trajectory generation for the planar quadrotor through differential
//! flatness of the position outputs.
//!
//! Positions follow a clamped degree-7 B-spline whose first and last five
//! control points sit on the endpoints, so the vehicle starts and ends in
//! hover. Attitude, body velocities and the effective rotor thrusts follow
//! from up to four time derivatives of the position; the planned input is the
//! effective thrust minus the learned disturbance, which makes the plan exact
//! for the learned dynamics.

use std::fmt::Write as _;
use std::io::{BufRead, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{learned_derivative, QuadrotorParams, SystemModel, UncertaintyModel};

pub const PLAN_FORMAT: &str = "rccm-plan/1";
const DEGREE: usize = 7;
const CLAMPED: usize = 5;
/// Penalty increases tried when the best plan is still infeasible.
const PENALTY_ROUNDS: usize = 3;
/// Extra tightening of the state and input bounds while searching.
const SEARCH_TIGHTEN: f64 = 0.02;

#[derive(Debug, Error)]
pub enum PlanError {
    #[error("invalid task: {0}")]
    InvalidTask(String),
    #[error("invalid planner configuration: {0}")]
    InvalidConfig(String),
    #[error("no clearance-feasible plan found (worst violation {violation:.4})")]
    Infeasible { violation: f64 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("plan file: {0}")]
    Parse(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Obstacle {
    pub center: [f64; 2],
    pub radius: f64,
}

/// Three circular obstacles between the task endpoints.
pub fn default_obstacles() -> Vec<Obstacle> {
    vec![
        Obstacle { center: [5.0, 5.0], radius: 1.0 },
        Obstacle { center: [2.5, 7.5], radius: 0.8 },
        Obstacle { center: [7.5, 2.5], radius: 0.8 },
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: String,
    pub start: [f64; 2],
    pub goal: [f64; 2],
    #[serde(default = "default_obstacles")]
    pub obstacles: Vec<Obstacle>,
    /// Where the vehicle actually starts; may differ from `start`.
    pub actual_start: [f64; 2],
}

impl TaskSpec {
    pub fn validate(&self, model: &SystemModel) -> Result<(), PlanError> {
        for (label, p) in [("start", self.start), ("goal", self.goal), ("actual_start", self.actual_start)] {
            for k in 0..2 {
                if !p[k].is_finite() || !model.x_box.bounds[k].contains(p[k]) {
                    return Err(PlanError::InvalidTask(format!("{label} {p:?} outside the position box")));
                }
            }
        }
        if self.obstacles.iter().any(|o| !(o.radius > 0.0)) {
            return Err(PlanError::InvalidTask("obstacle radius must be positive".into()));
        }
        Ok(())
    }

    /// Initial state at `actual_start`, hovering.
    pub fn initial_state(&self) -> DVector<f64> {
        let mut x = DVector::zeros(6);
        x[0] = self.actual_start[0];
        x[1] = self.actual_start[1];
        x
    }
}

/// The three navigation tasks with the default obstacles.
pub fn paper_tasks() -> Vec<TaskSpec> {
    let mk = |name: &str, start, goal, actual_start| TaskSpec {
        name: name.to_string(),
        start,
        goal,
        obstacles: default_obstacles(),
        actual_start,
    };
    vec![
        mk("task1", [2.0, 0.0], [8.0, 10.0], [0.0, 0.0]),
        mk("task2", [8.0, 0.0], [2.0, 10.0], [10.0, 0.0]),
        mk("task3", [0.0, 6.0], [10.0, 6.0], [0.0, 4.0]),
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlannerConfig {
    /// Free control points between the clamped ends.
    pub free_points: usize,
    /// Clearance required on the emitted plan.
    pub clearance_margin: f64,
    /// Extra clearance used while searching.
    pub search_clearance: f64,
    /// Fraction of each state-box half width kept free on the plan.
    pub state_margin: f64,
    /// Optional tighter bound on `|v_z|`.
    pub vz_limit: Option<f64>,
    /// Distance kept from the input box faces.
    pub input_margin: f64,
    pub min_arrival: f64,
    pub max_arrival: f64,
    pub time_weight: f64,
    /// Samples per candidate evaluation during search.
    pub search_samples: usize,
    pub output_dt: f64,
    /// Quasi-Newton iterations per initial guess.
    pub max_iters: usize,
    /// Lateral offsets of the initial guesses, meters.
    pub initial_offsets: [f64; 5],
    /// Quadratic penalty weight on constraint violations.
    pub penalty: f64,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self {
            free_points: 4,
            clearance_margin: 0.1,
            search_clearance: 0.15,
            state_margin: 0.1,
            vz_limit: None,
            input_margin: 0.5,
            min_arrival: 1.0,
            max_arrival: 60.0,
            time_weight: 5.0,
            search_samples: 200,
            output_dt: 1e-3,
            max_iters: 300,
            initial_offsets: [0.0, 1.5, -1.5, 3.0, -3.0],
            penalty: 1e6,
        }
    }
}

impl PlannerConfig {
    pub fn validate(&self) -> Result<(), PlanError> {
        let bad = |m: &str| Err(PlanError::InvalidConfig(m.to_string()));
        if self.search_samples < 10 {
            return bad("search_samples must be at least 10");
        }
        if !(self.output_dt > 0.0) {
            return bad("output_dt must be positive");
        }
        if !(self.min_arrival > 0.0 && self.max_arrival >= self.min_arrival) {
            return bad("arrival bounds must satisfy 0 < min <= max");
        }
        if !(self.penalty > 0.0) {
            return bad("penalty must be positive");
        }
        if self.clearance_margin < 0.0 || self.search_clearance < self.clearance_margin {
            return bad("search_clearance must be at least clearance_margin >= 0");
        }
        if !(0.0..0.5).contains(&self.state_margin) || self.input_margin < 0.0 {
            return bad("margins out of range");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlannedTrajectory {
    pub task: String,
    pub t_grid: Vec<f64>,
    pub x_star: Vec<DVector<f64>>,
    pub u_star: Vec<DVector<f64>>,
    pub xdot_star: Vec<DVector<f64>>,
    pub arrival_time: f64,
    pub cost: f64,
}

/// `integral |u|^2 dt + 5 T_a` by the trapezoid rule, with `T_a` the span of
/// the time grid.
pub fn evaluate_cost(t: &[f64], u: &[DVector<f64>]) -> f64 {
    evaluate_cost_weighted(t, u, 5.0)
}

pub fn evaluate_cost_weighted(t: &[f64], u: &[DVector<f64>], time_weight: f64) -> f64 {
    if t.len() < 2 {
        return 0.0;
    }
    let mut integral = 0.0;
    for k in 0..t.len() - 1 {
        integral += 0.5 * (t[k + 1] - t[k]) * (u[k].norm_squared() + u[k + 1].norm_squared());
    }
    integral + time_weight * (t[t.len() - 1] - t[0])
}

impl PlannedTrajectory {
    pub fn len(&self) -> usize {
        self.t_grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t_grid.is_empty()
    }

    /// Linear interpolation of `(x*, u*, xdot*)`; clamps outside the grid.
    pub fn sample(&self, t: f64) -> (DVector<f64>, DVector<f64>, DVector<f64>) {
        let n = self.t_grid.len();
        if t <= self.t_grid[0] {
            return (self.x_star[0].clone(), self.u_star[0].clone(), self.xdot_star[0].clone());
        }
        if t >= self.t_grid[n - 1] {
            return (self.x_star[n - 1].clone(), self.u_star[n - 1].clone(), self.xdot_star[n - 1].clone());
        }
        let k = match self.t_grid.binary_search_by(|v| v.partial_cmp(&t).unwrap()) {
            Ok(k) => return (self.x_star[k].clone(), self.u_star[k].clone(), self.xdot_star[k].clone()),
            Err(k) => k - 1,
        };
        let w = (t - self.t_grid[k]) / (self.t_grid[k + 1] - self.t_grid[k]);
        let lerp = |a: &DVector<f64>, b: &DVector<f64>| a * (1.0 - w) + b * w;
        (
            lerp(&self.x_star[k], &self.x_star[k + 1]),
            lerp(&self.u_star[k], &self.u_star[k + 1]),
            lerp(&self.xdot_star[k], &self.xdot_star[k + 1]),
        )
    }

    /// Largest `|(x_{k+1} - x_k)/h - F_l(x_mid, u_mid)|` over the grid.
    pub fn dynamics_residual(&self, model: &SystemModel, dhat: &dyn UncertaintyModel) -> f64 {
        let mut worst: f64 = 0.0;
        for k in 0..self.len().saturating_sub(1) {
            let h = self.t_grid[k + 1] - self.t_grid[k];
            let xm = (&self.x_star[k] + &self.x_star[k + 1]) * 0.5;
            let um = (&self.u_star[k] + &self.u_star[k + 1]) * 0.5;
            let fd = (&self.x_star[k + 1] - &self.x_star[k]) / h;
            match learned_derivative(model, dhat, &xm, &um) {
                Ok(f) => worst = worst.max((fd - f).norm()),
                Err(_) => return f64::INFINITY,
            }
        }
        worst
    }

    /// Smallest `distance - radius` over samples and obstacles.
    pub fn clearance(&self, obstacles: &[Obstacle]) -> f64 {
        let mut worst = f64::INFINITY;
        for x in &self.x_star {
            for o in obstacles {
                let d = ((x[0] - o.center[0]).powi(2) + (x[1] - o.center[1]).powi(2)).sqrt();
                worst = worst.min(d - o.radius);
            }
        }
        worst
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<(), PlanError> {
        writeln!(w, "# {PLAN_FORMAT}")?;
        writeln!(w, "# task {}", self.task)?;
        writeln!(w, "# arrival_time {}", self.arrival_time)?;
        writeln!(w, "# cost {}", self.cost)?;
        let n = self.x_star.first().map_or(0, |x| x.len());
        let m = self.u_star.first().map_or(0, |u| u.len());
        let mut header = String::from("t");
        for i in 0..n {
            write!(header, " x{i}").unwrap();
        }
        for i in 0..m {
            write!(header, " u{i}").unwrap();
        }
        for i in 0..n {
            write!(header, " xdot{i}").unwrap();
        }
        writeln!(w, "{header}")?;
        for k in 0..self.len() {
            let mut line = format!("{}", self.t_grid[k]);
            for v in self.x_star[k].iter().chain(self.u_star[k].iter()).chain(self.xdot_star[k].iter()) {
                write!(line, " {v}").unwrap();
            }
            writeln!(w, "{line}")?;
        }
        Ok(())
    }

    pub fn read_from(r: impl BufRead) -> Result<Self, PlanError> {
        let bad = |m: String| PlanError::Parse(m);
        let mut lines = r.lines();
        let first = lines.next().ok_or_else(|| bad("empty file".into()))??;
        if first.trim() != format!("# {PLAN_FORMAT}") {
            return Err(bad(format!("unsupported header {first:?}")));
        }
        let mut task = String::new();
        let mut arrival_time = f64::NAN;
        let mut cost = f64::NAN;
        let mut widths = None;
        let mut plan = PlannedTrajectory {
            task: String::new(),
            t_grid: vec![],
            x_star: vec![],
            u_star: vec![],
            xdot_star: vec![],
            arrival_time: 0.0,
            cost: 0.0,
        };
        for line in lines {
            let line = line?;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(meta) = line.strip_prefix('#') {
                let mut it = meta.split_whitespace();
                let key = it.next().unwrap_or("");
                let val = it.next().unwrap_or("");
                match key {
                    "task" => task = val.to_string(),
                    "arrival_time" => arrival_time = val.parse().map_err(|_| bad(format!("bad arrival_time {val}")))?,
                    "cost" => cost = val.parse().map_err(|_| bad(format!("bad cost {val}")))?,
                    _ => {}
                }
                continue;
            }
            if line.starts_with('t') {
                let cols: Vec<&str> = line.split_whitespace().collect();
                let n = cols.iter().filter(|c| c.starts_with('x') && !c.starts_with("xdot")).count();
                let m = cols.iter().filter(|c| c.starts_with('u')).count();
                if cols.len() != 1 + 2 * n + m {
                    return Err(bad("inconsistent column header".into()));
                }
                widths = Some((n, m));
                continue;
            }
            let (n, m) = widths.ok_or_else(|| bad("data before column header".into()))?;
            let vals: Vec<f64> = line
                .split_whitespace()
                .map(|s| s.parse::<f64>().map_err(|_| bad(format!("bad number {s:?}"))))
                .collect::<Result<_, _>>()?;
            if vals.len() != 1 + 2 * n + m {
                return Err(bad(format!("row has {} values, expected {}", vals.len(), 1 + 2 * n + m)));
            }
            plan.t_grid.push(vals[0]);
            plan.x_star.push(DVector::from_column_slice(&vals[1..1 + n]));
            plan.u_star.push(DVector::from_column_slice(&vals[1 + n..1 + n + m]));
            plan.xdot_star.push(DVector::from_column_slice(&vals[1 + n + m..]));
        }
        if plan.t_grid.is_empty() {
            return Err(bad("no samples".into()));
        }
        if plan.t_grid.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(bad("time grid not increasing".into()));
        }
        plan.task = task;
        plan.arrival_time = arrival_time;
        plan.cost = cost;
        Ok(plan)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), PlanError> {
        let file = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(file)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, PlanError> {
        let file = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(file)
    }
}

/// Clamped uniform B-spline in the plane on `s in [0, 1]`.
#[derive(Debug, Clone)]
struct Spline {
    ctrl: Vec<[f64; 2]>,
    knots: Vec<f64>,
}

impl Spline {
    fn new(ctrl: Vec<[f64; 2]>) -> Self {
        let n = ctrl.len();
        let spans = n - DEGREE;
        let mut knots = vec![0.0; DEGREE + 1];
        for i in 1..spans {
            knots.push(i as f64 / spans as f64);
        }
        knots.extend(std::iter::repeat_n(1.0, DEGREE + 1));
        Self { ctrl, knots }
    }

    fn find_span(&self, s: f64) -> usize {
        let n = self.ctrl.len() - 1;
        if s >= self.knots[n + 1] {
            return n;
        }
        if s <= self.knots[DEGREE] {
            return DEGREE;
        }
        let (mut lo, mut hi) = (DEGREE, n + 1);
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            if s < self.knots[mid] {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        lo
    }

    /// Position and its first four `s` derivatives.
    fn derivs(&self, s: f64) -> [[f64; 2]; 5] {
        let span = self.find_span(s);
        let ders = basis_derivs(span, s, &self.knots, 4);
        let mut out = [[0.0; 2]; 5];
        for (k, row) in ders.iter().enumerate() {
            for (j, b) in row.iter().enumerate() {
                let c = self.ctrl[span - DEGREE + j];
                out[k][0] += b * c[0];
                out[k][1] += b * c[1];
            }
        }
        out
    }
}

/// Nonzero basis functions of degree 7 at `s` and their derivatives up to
/// order `nd`.
fn basis_derivs(span: usize, s: f64, knots: &[f64], nd: usize) -> Vec<[f64; DEGREE + 1]> {
    let p = DEGREE;
    let mut ndu = [[0.0; DEGREE + 1]; DEGREE + 1];
    let mut left = [0.0; DEGREE + 1];
    let mut right = [0.0; DEGREE + 1];
    ndu[0][0] = 1.0;
    for j in 1..=p {
        left[j] = s - knots[span + 1 - j];
        right[j] = knots[span + j] - s;
        let mut saved = 0.0;
        for r in 0..j {
            ndu[j][r] = right[r + 1] + left[j - r];
            let temp = ndu[r][j - 1] / ndu[j][r];
            ndu[r][j] = saved + right[r + 1] * temp;
            saved = left[j - r] * temp;
        }
        ndu[j][j] = saved;
    }
    let mut ders = vec![[0.0; DEGREE + 1]; nd + 1];
    for j in 0..=p {
        ders[0][j] = ndu[j][p];
    }
    let mut a = [[0.0; DEGREE + 1]; 2];
    for r in 0..=p {
        let (mut s1, mut s2) = (0usize, 1usize);
        a[0][0] = 1.0;
        for k in 1..=nd {
            let mut d = 0.0;
            let rk = r as isize - k as isize;
            let pk = p - k;
            if r >= k {
                a[s2][0] = a[s1][0] / ndu[pk + 1][rk as usize];
                d = a[s2][0] * ndu[rk as usize][pk];
            }
            let j1 = if rk >= -1 { 1 } else { (-rk) as usize };
            let j2 = if r as isize - 1 <= pk as isize { k - 1 } else { p - r };
            for j in j1..=j2 {
                let idx = (rk + j as isize) as usize;
                a[s2][j] = (a[s1][j] - a[s1][j - 1]) / ndu[pk + 1][idx];
                d += a[s2][j] * ndu[idx][pk];
            }
            if r <= pk {
                a[s2][k] = -a[s1][k - 1] / ndu[pk + 1][r];
                d += a[s2][k] * ndu[r][pk];
            }
            ders[k][r] = d;
            std::mem::swap(&mut s1, &mut s2);
        }
    }
    let mut fac = p as f64;
    for k in 1..=nd {
        for v in ders[k].iter_mut() {
            *v *= fac;
        }
        fac *= (p - k) as f64;
    }
    ders
}

/// State and effective thrust (input plus matched term) from position
/// derivatives in time.
pub fn flat_state(params: &QuadrotorParams, d: &[[f64; 2]; 5]) -> (DVector<f64>, DVector<f64>) {
    let g = params.gravity;
    let (pv, pa, pj, ps) = (d[1], d[2], d[3], d[4]);
    let a = [pa[0], pa[1] + g];
    let norm2 = a[0] * a[0] + a[1] * a[1];
    let thrust = params.mass * norm2.sqrt();
    let phi = (-a[0]).atan2(a[1]);
    let num = -a[1] * pj[0] + a[0] * pj[1];
    let phi_dot = num / norm2;
    let num_dot = -a[1] * ps[0] + a[0] * ps[1];
    let norm2_dot = 2.0 * (a[0] * pj[0] + a[1] * pj[1]);
    let phi_ddot = (num_dot * norm2 - num * norm2_dot) / (norm2 * norm2);
    let (s, c) = phi.sin_cos();
    let x = DVector::from_vec(vec![
        d[0][0],
        d[0][1],
        phi,
        c * pv[0] + s * pv[1],
        -s * pv[0] + c * pv[1],
        phi_dot,
    ]);
    let moment = params.inertia * phi_ddot / params.arm;
    let u = DVector::from_vec(vec![0.5 * (thrust + moment), 0.5 * (thrust - moment)]);
    (x, u)
}

struct Problem<'a> {
    params: QuadrotorParams,
    model: &'a SystemModel,
    task: &'a TaskSpec,
    dhat: &'a dyn UncertaintyModel,
    cfg: PlannerConfig,
    state_lo: Vec<f64>,
    state_hi: Vec<f64>,
}

impl<'a> Problem<'a> {
    fn new(
        params: QuadrotorParams,
        model: &'a SystemModel,
        task: &'a TaskSpec,
        dhat: &'a dyn UncertaintyModel,
        cfg: PlannerConfig,
    ) -> Self {
        let mut state_lo = Vec::new();
        let mut state_hi = Vec::new();
        for (k, b) in model.x_box.bounds.iter().enumerate() {
            // positions keep the full box: tasks start on its faces
            let m = if k < 2 { 0.0 } else { cfg.state_margin * 0.5 * b.width() };
            state_lo.push(b.lo + m);
            state_hi.push(b.hi - m);
        }
        if let Some(v) = cfg.vz_limit {
            state_lo[4] = state_lo[4].max(-v);
            state_hi[4] = state_hi[4].min(v);
        }
        Self { params, model, task, dhat, cfg, state_lo, state_hi }
    }

    fn spline(&self, free: &[f64]) -> Spline {
        let mut ctrl = vec![self.task.start; CLAMPED];
        for c in free.chunks(2) {
            ctrl.push([c[0], c[1]]);
        }
        ctrl.extend(std::iter::repeat_n(self.task.goal, CLAMPED));
        Spline::new(ctrl)
    }

    fn state_at(&self, spline: &Spline, s: f64, ta: f64) -> (DVector<f64>, DVector<f64>) {
        let mut d = spline.derivs(s);
        let mut scale = 1.0;
        for k in 1..5 {
            scale /= ta;
            d[k][0] *= scale;
            d[k][1] *= scale;
        }
        let (x, u_eff) = flat_state(&self.params, &d);
        let u = u_eff - self.dhat.predict(&x);
        (x, u)
    }

    /// Calls `sink` with every constraint violation (positive when violated).
    fn violations(&self, x: &DVector<f64>, u: &DVector<f64>, clearance: f64, tighten: f64, mut sink: impl FnMut(f64)) {
        for o in &self.task.obstacles {
            let d = ((x[0] - o.center[0]).powi(2) + (x[1] - o.center[1]).powi(2)).sqrt();
            sink(o.radius + clearance - d);
        }
        for k in 0..x.len() {
            let t = if k < 2 { 0.0 } else { tighten };
            sink(self.state_lo[k] + t - x[k]);
            sink(x[k] - self.state_hi[k] + t);
        }
        for (k, b) in self.model.u_box.bounds.iter().enumerate() {
            let m = self.cfg.input_margin + tighten;
            sink(b.lo + m - u[k]);
            sink(u[k] - b.hi + m);
        }
    }

    fn violation(&self, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
        let mut v: f64 = 0.0;
        self.violations(x, u, self.cfg.clearance_margin, 0.0, |c| v = v.max(c));
        if v.is_nan() {
            return f64::INFINITY;
        }
        v.max(0.0)
    }

    /// Penalized objective over `[free points..., ln T_a]`.
    fn merit(&self, vars: &[f64]) -> f64 {
        let nv = vars.len();
        let ta = vars[nv - 1].exp();
        if !(ta.is_finite() && ta > 0.0) {
            return f64::INFINITY;
        }
        let spline = self.spline(&vars[..nv - 1]);
        let n = self.cfg.search_samples;
        let mut integral = 0.0;
        let mut prev = 0.0;
        let mut pen = 0.0;
        for i in 0..=n {
            let s = i as f64 / n as f64;
            let (x, u) = self.state_at(&spline, s, ta);
            let q = u.norm_squared();
            if i > 0 {
                integral += 0.5 * (prev + q) * ta / n as f64;
            }
            prev = q;
            self.violations(&x, &u, self.cfg.search_clearance, SEARCH_TIGHTEN, |c| {
                if c > 0.0 {
                    pen += c * c
                } else if c.is_nan() {
                    pen = f64::INFINITY
                }
            });
        }
        let lo = self.cfg.min_arrival.ln();
        let hi = self.cfg.max_arrival.ln();
        let tv = (lo - vars[nv - 1]).max(vars[nv - 1] - hi).max(0.0);
        let total = integral + self.cfg.time_weight * ta + self.cfg.penalty * (pen / n as f64 + tv * tv);
        if total.is_finite() {
            total
        } else {
            f64::INFINITY
        }
    }

    fn initial_guesses(&self) -> Vec<Vec<f64>> {
        let (a, b) = (self.task.start, self.task.goal);
        let dir = [b[0] - a[0], b[1] - a[1]];
        let len = (dir[0] * dir[0] + dir[1] * dir[1]).sqrt();
        let normal = if len > 0.0 { [-dir[1] / len, dir[0] / len] } else { [0.0, 1.0] };
        let k = self.cfg.free_points;
        let ta0 = (len / 0.7).clamp(self.cfg.min_arrival, self.cfg.max_arrival);
        let mut out = Vec::new();
        for offset in self.cfg.initial_offsets {
            let mut free = Vec::with_capacity(2 * k);
            for i in 0..k {
                let s = (i + 1) as f64 / (k + 1) as f64;
                let bump = offset * (std::f64::consts::PI * s).sin();
                let px = a[0] + s * dir[0] + bump * normal[0];
                let pz = a[1] + s * dir[1] + bump * normal[1];
                free.push(px.clamp(self.state_lo[0], self.state_hi[0]));
                free.push(pz.clamp(self.state_lo[1], self.state_hi[1]));
            }
            free.push(ta0.ln());
            out.push(free);
        }
        out
    }

    fn gradient(&self, vars: &[f64], f0: f64) -> DVector<f64> {
        let mut g = DVector::zeros(vars.len());
        let mut probe = vars.to_vec();
        for i in 0..vars.len() {
            let h = 1e-6 * (1.0 + vars[i].abs());
            probe[i] = vars[i] + h;
            let fp = self.merit(&probe);
            probe[i] = vars[i] - h;
            let fm = self.merit(&probe);
            probe[i] = vars[i];
            g[i] = if fp.is_finite() && fm.is_finite() {
                (fp - fm) / (2.0 * h)
            } else if fp.is_finite() {
                (fp - f0) / h
            } else {
                (f0 - fm) / h
            };
        }
        g
    }

    /// BFGS with finite-difference gradients and Armijo backtracking.
    fn search(&self, start: Vec<f64>) -> (Vec<f64>, f64) {
        let nv = start.len();
        let mut x = DVector::from_vec(start);
        let mut f = self.merit(x.as_slice());
        if !f.is_finite() {
            return (x.as_slice().to_vec(), f);
        }
        let mut g = self.gradient(x.as_slice(), f);
        let mut h_inv = DMatrix::<f64>::identity(nv, nv) * 1e-3;
        for _ in 0..self.cfg.max_iters {
            if g.amax() < 1e-6 * (1.0 + f.abs()) {
                break;
            }
            let mut dir = -(&h_inv * &g);
            if dir.dot(&g) >= 0.0 {
                h_inv = DMatrix::identity(nv, nv) * 1e-3;
                dir = -(&h_inv * &g);
            }
            // cap the step so one move shifts a control point by at most 2 m
            let cap = 2.0 / dir.amax().max(1e-300);
            let mut t = cap.min(1.0);
            let slope = dir.dot(&g);
            let mut accepted = None;
            for _ in 0..50 {
                let cand = &x + &dir * t;
                let fc = self.merit(cand.as_slice());
                if fc <= f + 1e-4 * t * slope {
                    accepted = Some((cand, fc));
                    break;
                }
                t *= 0.5;
            }
            let Some((xn, fnew)) = accepted else { break };
            let gn = self.gradient(xn.as_slice(), fnew);
            let s = &xn - &x;
            let y = &gn - &g;
            let sy = s.dot(&y);
            if sy > 1e-12 * s.norm() * y.norm() {
                let rho = 1.0 / sy;
                let eye = DMatrix::<f64>::identity(nv, nv);
                let left = &eye - &s * y.transpose() * rho;
                let right = &eye - &y * s.transpose() * rho;
                h_inv = &left * &h_inv * &right + &s * s.transpose() * rho;
            }
            let done = (f - fnew).abs() <= 1e-12 * (1.0 + f.abs());
            x = xn;
            f = fnew;
            g = gn;
            if done {
                break;
            }
        }
        (x.as_slice().to_vec(), f)
    }

    fn emit(&self, vars: &[f64]) -> PlannedTrajectory {
        let (free, log_ta) = (&vars[..vars.len() - 1], vars[vars.len() - 1]);
        let dt = self.cfg.output_dt;
        let steps = ((log_ta.exp() / dt).round() as usize).max(1);
        let ta = steps as f64 * dt;
        let spline = self.spline(free);
        let mut plan = PlannedTrajectory {
            task: self.task.name.clone(),
            t_grid: Vec::with_capacity(steps + 1),
            x_star: Vec::with_capacity(steps + 1),
            u_star: Vec::with_capacity(steps + 1),
            xdot_star: Vec::with_capacity(steps + 1),
            arrival_time: ta,
            cost: 0.0,
        };
        for k in 0..=steps {
            let t = k as f64 * dt;
            let (x, u) = self.state_at(&spline, k as f64 / steps as f64, ta);
            let xdot = learned_derivative(self.model, self.dhat, &x, &u).expect("dimensions fixed by the model");
            plan.t_grid.push(t);
            plan.x_star.push(x);
            plan.u_star.push(u);
            plan.xdot_star.push(xdot);
        }
        plan.cost = evaluate_cost_weighted(&plan.t_grid, &plan.u_star, self.cfg.time_weight);
        plan
    }
}

/// Plans a hover-to-hover trajectory for `task` under the learned dynamics.
pub fn plan_flat(
    params: &QuadrotorParams,
    model: &SystemModel,
    task: &TaskSpec,
    dhat: &dyn UncertaintyModel,
    cfg: &PlannerConfig,
) -> Result<PlannedTrajectory, PlanError> {
    cfg.validate()?;
    task.validate(model)?;
    let mut problem = Problem::new(*params, model, task, dhat, *cfg);
    let mut best: Option<(Vec<f64>, f64)> = None;
    for guess in problem.initial_guesses() {
        let found = problem.search(guess);
        if best.as_ref().is_none_or(|b| found.1 < b.1) {
            best = Some(found);
        }
    }
    let (mut vars, _) = best.expect("at least one initial guess");
    let mut rounds = 0;
    loop {
        let plan = problem.emit(&vars);
        let mut violation: f64 = 0.0;
        for (x, u) in plan.x_star.iter().zip(&plan.u_star) {
            violation = violation.max(problem.violation(x, u));
        }
        if violation == 0.0 {
            return Ok(plan);
        }
        // long active stretches can outweigh the penalty; stiffen and resume
        if rounds == PENALTY_ROUNDS {
            return Err(PlanError::Infeasible { violation });
        }
        rounds += 1;
        problem.cfg.penalty *= 100.0;
        vars = problem.search(vars).0;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{quadrotor_model, NoLearning};

    #[test]
    fn cost_of_constant_inputs() {
        let t = vec![0.0, 0.5, 1.0, 1.5, 2.0];
        let zero = vec![DVector::zeros(2); 5];
        assert!((evaluate_cost(&t, &zero) - 10.0).abs() < 1e-12);
        let t1 = vec![0.0, 0.25, 1.0];
        let ones = vec![DVector::from_element(2, 1.0); 3];
        assert!((evaluate_cost(&t1, &ones) - 7.0).abs() < 1e-12);
    }

    #[test]
    fn basis_partition_of_unity() {
        let ctrl: Vec<[f64; 2]> = (0..14).map(|i| [i as f64, (i * i) as f64]).collect();
        let sp = Spline::new(ctrl);
        for i in 0..=50 {
            let s = i as f64 / 50.0;
            let span = sp.find_span(s);
            let d = basis_derivs(span, s, &sp.knots, 4);
            let sum: f64 = d[0].iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
            for k in 1..5 {
                assert!(d[k].iter().sum::<f64>().abs() < 1e-6);
            }
        }
    }

    #[test]
    fn spline_derivatives_match_finite_differences() {
        let ctrl: Vec<[f64; 2]> = (0..12).map(|i| [(i as f64).sin(), (0.3 * i as f64).cos()]).collect();
        let sp = Spline::new(ctrl);
        let h = 1e-5;
        for &s in &[0.13, 0.4, 0.77] {
            let d = sp.derivs(s);
            let (p, m) = (sp.derivs(s + h), sp.derivs(s - h));
            for k in 0..4 {
                for c in 0..2 {
                    let fd = (p[k][c] - m[k][c]) / (2.0 * h);
                    assert!((fd - d[k + 1][c]).abs() < 1e-4 * (1.0 + d[k + 1][c].abs()), "order {} at {s}", k + 1);
                }
            }
        }
    }

    #[test]
    fn clamped_ends_are_at_rest() {
        let mut ctrl = vec![[1.0, 2.0]; 5];
        ctrl.extend([[3.0, 1.0], [4.0, 6.0], [2.0, 2.0]]);
        ctrl.extend(vec![[5.0, 5.0]; 5]);
        let sp = Spline::new(ctrl);
        for (s, end) in [(0.0, [1.0, 2.0]), (1.0, [5.0, 5.0])] {
            let d = sp.derivs(s);
            assert!((d[0][0] - end[0]).abs() < 1e-12 && (d[0][1] - end[1]).abs() < 1e-12);
            for k in 1..5 {
                assert!(d[k][0].abs() < 1e-9 && d[k][1].abs() < 1e-9);
            }
        }
    }

    #[test]
    fn flat_state_at_hover() {
        let p = QuadrotorParams::default();
        let d = [[3.0, 4.0], [0.0; 2], [0.0; 2], [0.0; 2], [0.0; 2]];
        let (x, u) = flat_state(&p, &d);
        assert_eq!(x.as_slice(), &[3.0, 4.0, 0.0, 0.0, 0.0, 0.0]);
        assert!((u[0] - p.hover_thrust_per_rotor()).abs() < 1e-12);
        assert!((u[1] - u[0]).abs() < 1e-15);
    }

    #[test]
    fn hover_in_place_takes_minimum_time() {
        let params = QuadrotorParams::default();
        let model = quadrotor_model(params).unwrap();
        let task = TaskSpec {
            name: "hover".into(),
            start: [4.0, 4.0],
            goal: [4.0, 4.0],
            obstacles: vec![],
            actual_start: [4.0, 4.0],
        };
        let cfg = PlannerConfig::default();
        let plan = plan_flat(&params, &model, &task, &NoLearning { input_dim: 2 }, &cfg).unwrap();
        assert!((plan.arrival_time - cfg.min_arrival).abs() < 2e-3, "T_a = {}", plan.arrival_time);
        let mg = params.mass * params.gravity;
        let lower = mg * mg / 2.0 * plan.arrival_time + 5.0 * plan.arrival_time;
        assert!(plan.cost >= lower * (1.0 - 1e-9));
        assert!(plan.cost <= lower * (1.0 + 1e-6));
    }
}
