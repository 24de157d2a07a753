//! Closed-loop simulation: scenario configuration, the fixed-step control
//! loop, trajectory logs and per-run summaries.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::controller::{nominal_ccm_control, rd_ccm_control, saturate, ControlError};
use crate::dynamics::{
    pseudo_inverse, quadrotor_model, rk4_step, true_derivative, DisturbanceField, DisturbanceKind, DynamicsError,
    NoLearning, QuadrotorParams, SystemModel, UncertaintyModel, QUADROTOR_BOUND_D, QUADROTOR_LIPSCHITZ_D,
};
use crate::estimator::{compute_eeb, steps_per_sample, EebParams, EstimatorError, EstimatorState};
use crate::geodesic::{GeodesicCurve, GeodesicError, GeodesicSolver, GeodesicSolverConfig};
use crate::learner::{LearnerError, SnMlp};
use crate::metric::{quadrotor_metric, MetricError, MetricPolynomial};
use crate::planner::{evaluate_cost, plan_flat, PlanError, PlannedTrajectory, PlannerConfig, TaskSpec};

pub const SCENARIO_SCHEMA: &str = "rccm-scenario/1";
/// Grid maximum of the quadrotor state derivative bound used by default.
pub const QUADROTOR_PHI: f64 = 783.96;
/// Energies at or below this are treated as numerically zero.
pub const ENERGY_FLOOR: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("scenario: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
    #[error(transparent)]
    Geodesic(#[from] GeodesicError),
    #[error(transparent)]
    Control(#[from] ControlError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error(transparent)]
    Learner(#[from] LearnerError),
    #[error("log: {0}")]
    Log(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ControllerKind {
    /// Robust condition with the sampled disturbance estimate.
    RdCcm,
    /// Nominal condition with the learned model and no error bound.
    CcmLearned,
    /// Nominal condition ignoring the uncertainty entirely.
    CcmNominal,
}

impl ControllerKind {
    pub fn label(self) -> &'static str {
        match self {
            ControllerKind::RdCcm => "rd-ccm",
            ControllerKind::CcmLearned => "ccm-learned",
            ControllerKind::CcmNominal => "ccm-nominal",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeltaSource {
    /// Calibrated from simulation, inflated by the safety factor.
    Empirical,
    /// The proved bound `delta(t, T)`.
    Theoretical,
    Fixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    /// Invariant breaches are reported and make the CLI exit nonzero.
    #[default]
    Acceptance,
    Exploratory,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControllerConfig {
    pub kind: ControllerKind,
    /// Overrides the metric's contraction rate.
    pub lambda: Option<f64>,
    pub delta_source: DeltaSource,
    /// Value for `fixed`, or a precomputed calibration for `empirical`.
    pub delta: Option<f64>,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            kind: ControllerKind::RdCcm,
            lambda: None,
            delta_source: DeltaSource::Empirical,
            delta: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimatorConfig {
    pub a: f64,
    pub period: f64,
    pub safety_factor: f64,
    /// Bound on `|f + B u| + b_d |B|` over the boxes.
    pub phi: f64,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self { a: 10.0, period: 0.002, safety_factor: 2.0, phi: QUADROTOR_PHI }
    }
}

/// On-disk scenario description (TOML).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub schema: String,
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_dt")]
    pub dt: f64,
    /// Defaults to the plan's arrival time.
    #[serde(default)]
    pub horizon: Option<f64>,
    #[serde(default)]
    pub mode: RunMode,
    #[serde(default)]
    pub model: QuadrotorParams,
    #[serde(default = "default_disturbance")]
    pub disturbance: DisturbanceKind,
    /// Metric file; the shipped quadrotor metric when absent.
    #[serde(default)]
    pub metric: Option<PathBuf>,
    #[serde(default)]
    pub controller: ControllerConfig,
    #[serde(default)]
    pub estimator: EstimatorConfig,
    /// Learned model file; no learning when absent.
    #[serde(default)]
    pub learner: Option<PathBuf>,
    pub task: TaskSpec,
    /// Plan file; planned on the fly with `planner` when absent.
    #[serde(default)]
    pub plan: Option<PathBuf>,
    #[serde(default)]
    pub planner: PlannerConfig,
    #[serde(default)]
    pub geodesic: GeodesicSolverConfig,
}

fn default_dt() -> f64 {
    5e-4
}

fn default_disturbance() -> DisturbanceKind {
    DisturbanceKind::QuadrotorWind
}

impl ScenarioConfig {
    pub fn new(name: &str, task: TaskSpec) -> Self {
        Self {
            schema: SCENARIO_SCHEMA.to_string(),
            name: name.to_string(),
            seed: 0,
            dt: default_dt(),
            horizon: None,
            mode: RunMode::Acceptance,
            model: QuadrotorParams::default(),
            disturbance: default_disturbance(),
            metric: None,
            controller: ControllerConfig::default(),
            estimator: EstimatorConfig::default(),
            learner: None,
            task,
            plan: None,
            planner: PlannerConfig::default(),
            geodesic: GeodesicSolverConfig::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, SimError> {
        let cfg: Self = toml::from_str(text).map_err(|e| SimError::Config(e.to_string()))?;
        if cfg.schema != SCENARIO_SCHEMA {
            return Err(SimError::Config(format!("unsupported schema {:?}", cfg.schema)));
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String, SimError> {
        toml::to_string_pretty(self).map_err(|e| SimError::Config(e.to_string()))
    }

    /// Reads a scenario and makes its file references relative to the
    /// scenario's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, SimError> {
        let path = path.as_ref();
        let mut cfg = Self::from_toml(&std::fs::read_to_string(path)?)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.metric, &mut cfg.learner, &mut cfg.plan].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if !(self.dt > 0.0) {
            return Err(SimError::Config("dt must be positive".into()));
        }
        if let Some(h) = self.horizon {
            if !(h >= self.dt) {
                return Err(SimError::Config("horizon must be at least one step".into()));
            }
        }
        steps_per_sample(self.estimator.period, self.dt)?;
        if !(self.estimator.safety_factor >= 1.0) {
            return Err(SimError::Config("safety_factor must be at least 1".into()));
        }
        if self.controller.delta_source == DeltaSource::Fixed && self.controller.delta.is_none() {
            return Err(SimError::Config("delta_source = \"fixed\" needs a delta value".into()));
        }
        if let Some(d) = self.controller.delta {
            if !(d >= 0.0) {
                return Err(SimError::Config("delta must be nonnegative".into()));
            }
        }
        for p in [&self.metric, &self.learner, &self.plan].into_iter().flatten() {
            if !p.exists() {
                return Err(SimError::Config(format!("referenced file {} does not exist", p.display())));
            }
        }
        Ok(())
    }
}

/// A scenario with every reference loaded.
#[derive(Clone)]
pub struct Scenario {
    pub name: String,
    pub params: QuadrotorParams,
    pub model: SystemModel,
    pub disturbance: DisturbanceField,
    pub metric: MetricPolynomial,
    pub dhat: Arc<dyn UncertaintyModel>,
    pub plan: Arc<PlannedTrajectory>,
    pub controller: ControllerKind,
    pub delta_source: DeltaSource,
    /// Constant bound fed to the robust controller (ignored for `theoretical`).
    pub delta: f64,
    pub estimator: EstimatorConfig,
    pub eeb: EebParams,
    pub x0: DVector<f64>,
    pub horizon: f64,
    pub dt: f64,
    pub mode: RunMode,
    pub geodesic: GeodesicSolverConfig,
}

/// Largest `|B|` and `|B^+|` (exact for constant `B`).
pub fn input_matrix_norms(model: &SystemModel, x: &DVector<f64>) -> (f64, f64) {
    let b = model.input_matrix(x);
    let sv = b.singular_values();
    (sv.max(), 1.0 / sv.min())
}

pub fn eeb_params(model: &SystemModel, est: &EstimatorConfig, x: &DVector<f64>) -> EebParams {
    let (max_b, max_b_pinv) = input_matrix_norms(model, x);
    EebParams {
        phi: est.phi,
        max_b,
        max_b_pinv,
        lipschitz_b: model.lipschitz_b,
        lipschitz_d: model.lipschitz_d,
        bound_d: model.bound_d,
        n: model.state_dim(),
        a: est.a,
        period: est.period,
    }
}

impl Scenario {
    /// Loads files and plans if no plan is given. An empirical `delta`
    /// without a value is calibrated on this scenario.
    pub fn resolve(cfg: &ScenarioConfig) -> Result<Self, SimError> {
        Self::resolve_with(cfg, None, None)
    }

    /// Like [`Scenario::resolve`], with an in-memory learned model and plan
    /// taking the place of the config's file references.
    pub fn resolve_with(
        cfg: &ScenarioConfig,
        dhat: Option<Arc<dyn UncertaintyModel>>,
        plan: Option<Arc<PlannedTrajectory>>,
    ) -> Result<Self, SimError> {
        cfg.validate()?;
        let params = cfg.model;
        let model = quadrotor_model(params)?;
        let disturbance = match &cfg.disturbance {
            DisturbanceKind::QuadrotorWind => DisturbanceField {
                kind: DisturbanceKind::QuadrotorWind,
                declared_lipschitz: QUADROTOR_LIPSCHITZ_D,
                declared_bound: QUADROTOR_BOUND_D,
            },
            DisturbanceKind::Zero { input_dim } => DisturbanceField::zero(*input_dim),
            DisturbanceKind::Constant { value } => DisturbanceField::constant(value.clone()),
        };
        let mut metric = match &cfg.metric {
            Some(p) => MetricPolynomial::load(p)?,
            None => quadrotor_metric(),
        };
        if let Some(l) = cfg.controller.lambda {
            metric = metric.with_lambda(l);
        }
        let dhat: Arc<dyn UncertaintyModel> = match (dhat, &cfg.learner) {
            (Some(m), _) => m,
            (None, Some(p)) => Arc::new(SnMlp::load(p)?),
            (None, None) => Arc::new(NoLearning { input_dim: model.input_dim() }),
        };
        let plan = match (plan, &cfg.plan) {
            (Some(p), _) => p,
            (None, Some(p)) => Arc::new(PlannedTrajectory::load(p)?),
            (None, None) => Arc::new(plan_flat(&params, &model, &cfg.task, dhat.as_ref(), &cfg.planner)?),
        };
        let x0 = cfg.task.initial_state();
        let eeb = eeb_params(&model, &cfg.estimator, &x0);
        let horizon = cfg.horizon.unwrap_or(plan.arrival_time);
        let mut sc = Scenario {
            name: cfg.name.clone(),
            params,
            model,
            disturbance,
            metric,
            dhat,
            plan,
            controller: cfg.controller.kind,
            delta_source: cfg.controller.delta_source,
            delta: cfg.controller.delta.unwrap_or(0.0),
            estimator: cfg.estimator,
            eeb,
            x0,
            horizon,
            dt: cfg.dt,
            mode: cfg.mode,
            geodesic: cfg.geodesic,
        };
        if sc.delta_source == DeltaSource::Empirical && cfg.controller.delta.is_none() {
            sc.delta = empirical_eeb_calibration(std::slice::from_ref(&sc), sc.estimator.safety_factor)?;
        }
        Ok(sc)
    }

    /// Bound fed to the controller at time `t`.
    pub fn controller_delta(&self, t: f64) -> f64 {
        match self.delta_source {
            DeltaSource::Theoretical => compute_eeb(&self.eeb, t),
            _ => self.delta,
        }
    }
}

/// One logged control instant.
#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub t: f64,
    pub x: Vec<f64>,
    pub x_star: Vec<f64>,
    pub u: Vec<f64>,
    pub u_star: Vec<f64>,
    pub d_check: Vec<f64>,
    pub d_true: Vec<f64>,
    pub d_hat: Vec<f64>,
    /// Bound fed to the controller.
    pub delta: f64,
    /// Proved bound `delta(t, T)`.
    pub delta_theory: f64,
    pub energy: f64,
    /// Backward difference of `ln E`.
    pub energy_slope: f64,
    /// Condition slack with the estimate (controller's view).
    pub rre_slack: f64,
    /// `(1/2) dE/dt + lambda E` under the true disturbance.
    pub true_slack: f64,
    pub geodesic_iterations: usize,
    pub geodesic_converged: bool,
    pub constraint_active: bool,
    pub saturated: bool,
}

impl LogRow {
    pub fn estimation_error(&self) -> f64 {
        self.d_check.iter().zip(&self.d_true).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
    }

    pub fn position_deviation(&self) -> f64 {
        ((self.x[0] - self.x_star[0]).powi(2) + (self.x[1] - self.x_star[1]).powi(2)).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryLog {
    pub name: String,
    pub state_dim: usize,
    pub input_dim: usize,
    pub rows: Vec<LogRow>,
    /// Set when the run stopped early.
    pub failure: Option<String>,
}

const SCALAR_COLUMNS: [&str; 10] = [
    "delta",
    "delta_theory",
    "energy",
    "energy_slope",
    "rre_slack",
    "true_slack",
    "geodesic_iterations",
    "geodesic_converged",
    "constraint_active",
    "saturated",
];

impl TrajectoryLog {
    fn header(&self) -> Vec<String> {
        let mut h = vec!["t".to_string()];
        for (prefix, k) in [
            ("x", self.state_dim),
            ("x_star", self.state_dim),
            ("u", self.input_dim),
            ("u_star", self.input_dim),
            ("d_check", self.input_dim),
            ("d_true", self.input_dim),
            ("d_hat", self.input_dim),
        ] {
            for i in 0..k {
                h.push(format!("{prefix}{i}"));
            }
        }
        h.extend(SCALAR_COLUMNS.iter().map(|s| s.to_string()));
        h
    }

    pub fn write_csv(&self, w: impl std::io::Write) -> Result<(), SimError> {
        let err = |e: csv::Error| SimError::Log(e.to_string());
        let mut out = csv::Writer::from_writer(w);
        out.write_record(self.header()).map_err(err)?;
        for r in &self.rows {
            let mut rec: Vec<String> = vec![r.t.to_string()];
            for v in [&r.x, &r.x_star, &r.u, &r.u_star, &r.d_check, &r.d_true, &r.d_hat] {
                rec.extend(v.iter().map(|x| x.to_string()));
            }
            for v in [r.delta, r.delta_theory, r.energy, r.energy_slope, r.rre_slack, r.true_slack] {
                rec.push(v.to_string());
            }
            rec.push(r.geodesic_iterations.to_string());
            for b in [r.geodesic_converged, r.constraint_active, r.saturated] {
                rec.push(u8::from(b).to_string());
            }
            out.write_record(&rec).map_err(err)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_csv(name: &str, r: impl std::io::Read) -> Result<Self, SimError> {
        let bad = |m: String| SimError::Log(m);
        let mut rdr = csv::Reader::from_reader(r);
        let header = rdr.headers().map_err(|e| bad(e.to_string()))?.clone();
        let count = |p: &str| {
            header
                .iter()
                .filter(|h| h.strip_prefix(p).is_some_and(|rest| rest.chars().all(|c| c.is_ascii_digit()) && !rest.is_empty()))
                .count()
        };
        let n = count("x");
        let m = count("u");
        let mut log = TrajectoryLog { name: name.to_string(), state_dim: n, input_dim: m, rows: vec![], failure: None };
        if header.iter().map(String::from).collect::<Vec<_>>() != log.header() {
            return Err(bad("unexpected column layout".into()));
        }
        for rec in rdr.records() {
            let rec = rec.map_err(|e| bad(e.to_string()))?;
            let vals: Vec<f64> = rec
                .iter()
                .map(|s| s.parse::<f64>().map_err(|_| bad(format!("bad number {s:?}"))))
                .collect::<Result<_, _>>()?;
            let mut it = vals.into_iter();
            let mut take = |k: usize| -> Vec<f64> { it.by_ref().take(k).collect() };
            let t = take(1)[0];
            let (x, x_star, u, u_star, d_check, d_true, d_hat) = (take(n), take(n), take(m), take(m), take(m), take(m), take(m));
            let s = take(10);
            log.rows.push(LogRow {
                t,
                x,
                x_star,
                u,
                u_star,
                d_check,
                d_true,
                d_hat,
                delta: s[0],
                delta_theory: s[1],
                energy: s[2],
                energy_slope: s[3],
                rre_slack: s[4],
                true_slack: s[5],
                geodesic_iterations: s[6] as usize,
                geodesic_converged: s[7] != 0.0,
                constraint_active: s[8] != 0.0,
                saturated: s[9] != 0.0,
            });
        }
        Ok(log)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), SimError> {
        self.write_csv(std::io::BufWriter::new(std::fs::File::create(path)?))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, SimError> {
        let path = path.as_ref();
        let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        Self::read_csv(&name, std::io::BufReader::new(std::fs::File::open(path)?))
    }

    /// `J` of the applied inputs over the logged span.
    pub fn cost(&self) -> f64 {
        let t: Vec<f64> = self.rows.iter().map(|r| r.t).collect();
        let u: Vec<DVector<f64>> = self.rows.iter().map(|r| DVector::from_column_slice(&r.u)).collect();
        evaluate_cost(&t, &u)
    }
}

/// Least-squares slope of `ln E` against `t` from the start until `E` first
/// falls to the floor.
pub fn energy_decay_slope(log: &TrajectoryLog) -> Option<f64> {
    let pts: Vec<(f64, f64)> = log
        .rows
        .iter()
        .take_while(|r| r.energy > ENERGY_FLOOR)
        .map(|r| (r.t, r.energy.ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mt = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let me = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mt) * (p.1 - me)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mt).powi(2)).sum();
    Some(sxy / sxx)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub name: String,
    pub task: String,
    pub controller: String,
    pub rows: usize,
    pub horizon: f64,
    pub cost: f64,
    pub planned_cost: f64,
    pub energy_initial: f64,
    pub energy_final: f64,
    pub energy_decay_slope: Option<f64>,
    /// End of the transient: when `R |x(0) - x*(0)| e^{-lambda t}` reaches 0.05 m.
    pub transient_end: f64,
    pub max_deviation_after_transient: f64,
    pub max_estimation_error_after_first_sample: f64,
    /// Largest `|d_check - d|` for `t >= 0.1` s.
    pub max_estimation_error_settled: f64,
    pub eeb_violations: usize,
    pub state_exits: usize,
    pub saturation_events: usize,
    pub geodesic_failures: usize,
    /// Steps where energy grew faster than the guaranteed rate allows.
    pub true_slack_violations: usize,
    pub delta: f64,
    pub failure: Option<String>,
    pub breaches: Vec<String>,
}

impl RunSummary {
    pub fn passed(&self) -> bool {
        self.breaches.is_empty()
    }
}

pub const DEVIATION_TOLERANCE: f64 = 0.05;

pub fn summarize(sc: &Scenario, log: &TrajectoryLog) -> RunSummary {
    let rows = &log.rows;
    let overshoot = sc.metric.overshoot();
    let init_dev = if let Some(r) = rows.first() {
        r.x.iter().zip(&r.x_star).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
    } else {
        0.0
    };
    let lambda = sc.metric.lambda;
    let transient_end = if init_dev > 0.0 {
        ((overshoot * init_dev / DEVIATION_TOLERANCE).ln() / lambda).max(0.0)
    } else {
        0.0
    };
    let fold = |it: &mut dyn Iterator<Item = f64>| it.fold(0.0f64, f64::max);
    let max_dev = fold(&mut rows.iter().filter(|r| r.t >= transient_end).map(|r| r.position_deviation()));
    let period = sc.estimator.period;
    let err_first = fold(&mut rows.iter().filter(|r| r.t >= period).map(|r| r.estimation_error()));
    let err_settled = fold(&mut rows.iter().filter(|r| r.t >= 0.1).map(|r| r.estimation_error()));
    let eeb_violations = rows.iter().filter(|r| r.estimation_error() > r.delta_theory).count();
    let state_exits = rows
        .iter()
        .filter(|r| !sc.model.x_box.contains(&DVector::from_column_slice(&r.x)))
        .count();
    let saturation_events = rows.iter().filter(|r| r.saturated).count();
    let geodesic_failures = rows.iter().filter(|r| !r.geodesic_converged).count();
    let slack_tol = 1e-8;
    let true_slack_violations = rows
        .iter()
        .filter(|r| r.energy > ENERGY_FLOOR && r.true_slack > slack_tol * (1.0 + r.energy))
        .count();
    let mut breaches = Vec::new();
    if let Some(f) = &log.failure {
        breaches.push(format!("run failed: {f}"));
    }
    if sc.mode == RunMode::Acceptance {
        for (count, what) in [
            (state_exits, "state-box exits"),
            (saturation_events, "input saturation events"),
            (geodesic_failures, "unconverged geodesic solves"),
            (eeb_violations, "estimation-bound violations"),
        ] {
            if count > 0 {
                breaches.push(format!("{count} {what}"));
            }
        }
    }
    RunSummary {
        name: log.name.clone(),
        task: sc.plan.task.clone(),
        controller: sc.controller.label().to_string(),
        rows: rows.len(),
        horizon: sc.horizon,
        cost: log.cost(),
        planned_cost: sc.plan.cost,
        energy_initial: rows.first().map_or(0.0, |r| r.energy),
        energy_final: rows.last().map_or(0.0, |r| r.energy),
        energy_decay_slope: energy_decay_slope(log),
        transient_end,
        max_deviation_after_transient: max_dev,
        max_estimation_error_after_first_sample: err_first,
        max_estimation_error_settled: err_settled,
        eeb_violations,
        state_exits,
        saturation_events,
        geodesic_failures,
        true_slack_violations,
        delta: sc.delta,
        failure: log.failure.clone(),
        breaches,
    }
}

pub struct RunOutput {
    pub log: TrajectoryLog,
    pub summary: RunSummary,
}

/// Runs the closed loop. A failing step ends the run; the partial log is
/// returned with `failure` set.
pub fn simulate(sc: &Scenario) -> Result<TrajectoryLog, SimError> {
    let solver = GeodesicSolver::new(sc.geodesic)?;
    let steps = (sc.horizon / sc.dt).round() as usize;
    let per_sample = steps_per_sample(sc.estimator.period, sc.dt)?;
    let model = &sc.model;
    let b_pinv: Option<DMatrix<f64>> =
        model.input_matrix_is_constant().then(|| pseudo_inverse(&model.input_matrix(&sc.x0)));
    let mut est = EstimatorState::new(model, &sc.x0, sc.estimator.a, sc.estimator.period)?;
    let mut x = sc.x0.clone();
    let mut prev: Option<GeodesicCurve> = None;
    let mut log = TrajectoryLog {
        name: sc.name.clone(),
        state_dim: model.state_dim(),
        input_dim: model.input_dim(),
        rows: Vec::with_capacity(steps + 1),
        failure: None,
    };
    let zero_d = DVector::zeros(model.input_dim());
    let mut prev_energy: Option<f64> = None;
    for k in 0..=steps {
        let t = k as f64 * sc.dt;
        if k % per_sample == 0 {
            let i = (k / per_sample) as u64;
            match &b_pinv {
                Some(bp) if i > 0 => est.apply_update(&x, bp, i),
                Some(_) => {}
                None => est.sample_update(model, &x, i as f64 * sc.estimator.period)?,
            }
        }
        let (xs, us, xds) = sc.plan.sample(t);
        let step = (|| -> Result<_, SimError> {
            let curve = solver.solve(&sc.metric, &xs, &x, prev.as_ref())?;
            let delta = sc.controller_delta(t);
            let dhat = sc.dhat.predict(&x);
            let (dec, terms) = match sc.controller {
                ControllerKind::RdCcm => {
                    rd_ccm_control(&curve, &sc.metric, model, &x, &xs, &us, &xds, &est.d_check, delta)?
                }
                ControllerKind::CcmLearned => {
                    nominal_ccm_control(&curve, &sc.metric, model, sc.dhat.as_ref(), &x, &xs, &us, &xds)?
                }
                ControllerKind::CcmNominal => {
                    rd_ccm_control(&curve, &sc.metric, model, &x, &xs, &us, &xds, &zero_d, 0.0)?
                }
            };
            let used_delta = if sc.controller == ControllerKind::RdCcm { delta } else { 0.0 };
            Ok((curve, dec, terms, dhat, used_delta))
        })();
        let (curve, dec, terms, dhat, used_delta) = match step {
            Ok(v) => v,
            Err(e) => {
                log.failure = Some(format!("t = {t}: {e}"));
                return Ok(log);
            }
        };
        let (u, saturated) = saturate(model, &dec.u);
        let d_true = sc.disturbance.eval(&x);
        let energy_slope = match prev_energy {
            Some(pe) if pe > 0.0 && curve.energy > 0.0 => (curve.energy.ln() - pe.ln()) / sc.dt,
            _ => 0.0,
        };
        prev_energy = Some(curve.energy);
        log.rows.push(LogRow {
            t,
            x: x.iter().copied().collect(),
            x_star: xs.iter().copied().collect(),
            u: u.iter().copied().collect(),
            u_star: us.iter().copied().collect(),
            d_check: est.d_check.iter().copied().collect(),
            d_true: d_true.iter().copied().collect(),
            d_hat: dhat.iter().copied().collect(),
            delta: used_delta,
            delta_theory: compute_eeb(&sc.eeb, t),
            energy: curve.energy,
            energy_slope,
            rre_slack: terms.slack(&u, &us),
            true_slack: terms.true_slack(model, &x, &u, &d_true),
            geodesic_iterations: curve.iterations,
            geodesic_converged: curve.converged,
            constraint_active: dec.constraint_active,
            saturated,
        });
        if k == steps {
            break;
        }
        if let Err(e) = est.predictor_step(model, &x, &u, sc.dt) {
            log.failure = Some(format!("t = {t}: {e}"));
            return Ok(log);
        }
        let mut rhs = |_: f64, y: &DVector<f64>| {
            true_derivative(model, &sc.disturbance, y, &u).unwrap_or_else(|_| DVector::from_element(y.len(), f64::NAN))
        };
        let next = rk4_step(&mut rhs, t, &x, sc.dt);
        if next.iter().any(|v| !v.is_finite()) {
            log.failure = Some(format!("state diverged after t = {t}"));
            return Ok(log);
        }
        x = next;
        prev = Some(curve);
    }
    Ok(log)
}

pub fn run_scenario(sc: &Scenario) -> Result<RunOutput, SimError> {
    let log = simulate(sc)?;
    let summary = summarize(sc, &log);
    Ok(RunOutput { log, summary })
}

/// Largest `|d_check - d|` after the first sample over the given scenarios,
/// run with `delta = 0`, times `safety_factor`.
pub fn empirical_eeb_calibration(scenarios: &[Scenario], safety_factor: f64) -> Result<f64, SimError> {
    let mut worst: f64 = 0.0;
    for sc in scenarios {
        let mut probe = sc.clone();
        probe.delta_source = DeltaSource::Fixed;
        probe.delta = 0.0;
        probe.mode = RunMode::Exploratory;
        let log = simulate(&probe)?;
        if let Some(f) = log.failure {
            return Err(SimError::Log(format!("calibration run {} failed: {f}", sc.name)));
        }
        for r in log.rows.iter().filter(|r| r.t >= sc.estimator.period) {
            worst = worst.max(r.estimation_error());
        }
    }
    Ok(worst * safety_factor)
}
