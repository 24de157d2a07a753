//! The learning experiment: training data for the model tiers, the
//! task x tier x controller matrix of closed-loop runs, and its report.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{paper_disturbance, quadrotor_model, Interval, QuadrotorParams, SystemModel, UncertaintyModel};
use crate::estimator::steps_per_sample;
use crate::geodesic::GeodesicSolverConfig;
use crate::learner::{train, SnMlp, TrainConfig, TrainingSet};
use crate::planner::{paper_tasks, plan_flat, PlannedTrajectory, PlannerConfig, TaskSpec};
use crate::sim::{
    empirical_eeb_calibration, energy_decay_slope, run_scenario, ControllerKind, DeltaSource, EstimatorConfig,
    RunMode, RunSummary, Scenario, ScenarioConfig, SimError, TrajectoryLog, SCENARIO_SCHEMA,
};

/// Caps the matrix thread pool.
pub const THREADS_ENV: &str = "RCCM_THREADS";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Tier {
    None,
    Poor,
    Moderate,
    Good,
}

impl Tier {
    pub const ALL: [Tier; 4] = [Tier::None, Tier::Poor, Tier::Moderate, Tier::Good];

    pub fn label(self) -> &'static str {
        match self {
            Tier::None => "none",
            Tier::Poor => "poor",
            Tier::Moderate => "moderate",
            Tier::Good => "good",
        }
    }

    pub fn parse(s: &str) -> Option<Tier> {
        Tier::ALL.into_iter().find(|t| t.label() == s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TierConfig {
    /// Seconds between log rows kept as training samples.
    pub sample_stride: f64,
    /// `|v_z|` cap for the extra trajectories of the moderate tier.
    pub moderate_vz_limit: f64,
    /// Points per feature axis for the good tier.
    pub good_grid: Vec<usize>,
    /// State coordinates fed to the network.
    pub features: Vec<usize>,
    pub hidden_width: usize,
    pub hidden_layers: usize,
    pub train: TrainConfig,
}

impl Default for TierConfig {
    fn default() -> Self {
        Self {
            sample_stride: 0.02,
            moderate_vz_limit: 0.5,
            good_grid: vec![16, 16, 9, 5],
            features: vec![0, 1, 3, 4],
            hidden_width: 32,
            hidden_layers: 4,
            train: TrainConfig { epochs: 150, ..TrainConfig::default() },
        }
    }
}

impl TierConfig {
    pub fn validate(&self, model: &SystemModel) -> Result<(), SimError> {
        if !(self.sample_stride > 0.0) || !(self.moderate_vz_limit > 0.0) {
            return Err(SimError::Config("sample_stride and moderate_vz_limit must be positive".into()));
        }
        if self.features.is_empty() || self.features.iter().any(|&k| k >= model.state_dim()) {
            return Err(SimError::Config("features must index state coordinates".into()));
        }
        if self.good_grid.len() != self.features.len() || self.good_grid.iter().any(|&c| c < 2) {
            return Err(SimError::Config("good_grid needs at least 2 points per feature".into()));
        }
        if self.hidden_width == 0 {
            return Err(SimError::Config("hidden_width must be positive".into()));
        }
        Ok(())
    }

    pub fn feature_names(&self, model: &SystemModel) -> Vec<String> {
        let names = model.state_names();
        self.features.iter().map(|&k| names[k].clone()).collect()
    }

    /// Fresh network for these features and the model's Lipschitz budget.
    pub fn network(&self, model: &SystemModel) -> Result<SnMlp, SimError> {
        let mut dims = vec![self.features.len()];
        dims.extend(std::iter::repeat_n(self.hidden_width, self.hidden_layers));
        dims.push(model.input_dim());
        Ok(SnMlp::new(dims, self.features.clone(), self.feature_names(model), model.lipschitz_d, self.train.seed)?)
    }
}

/// Feature rows from a log every `stride` seconds, labelled with the logged
/// ground-truth disturbance.
pub fn samples_from_log(log: &TrajectoryLog, features: &[usize], names: &[String], stride: f64) -> TrainingSet {
    let mut set = TrainingSet { feature_names: names.to_vec(), ..TrainingSet::default() };
    let mut next = 0.0;
    for r in &log.rows {
        if r.t + 1e-9 < next {
            continue;
        }
        next = r.t + stride;
        set.push(features.iter().map(|&k| r.x[k]).collect(), r.d_true.clone(), &log.name);
    }
    set
}

/// True disturbance on a grid over the feature axes of the state box; the
/// other coordinates sit at the box center.
pub fn grid_samples(model: &SystemModel, features: &[usize], names: &[String], counts: &[usize], offset: bool) -> TrainingSet {
    let dist = paper_disturbance();
    let axes: Vec<Vec<f64>> = features
        .iter()
        .zip(counts)
        .map(|(&k, &c)| {
            let b = model.x_box.bounds[k];
            if offset {
                // midpoints of the grid cells
                let h = b.width() / (c - 1) as f64;
                (0..c - 1).map(|i| b.lo + (i as f64 + 0.5) * h).collect()
            } else {
                b.linspace(c)
            }
        })
        .collect();
    let center: Vec<f64> = model.x_box.bounds.iter().map(|b: &Interval| 0.5 * (b.lo + b.hi)).collect();
    let mut set = TrainingSet { feature_names: names.to_vec(), ..TrainingSet::default() };
    let mut idx = vec![0usize; axes.len()];
    loop {
        let mut x = DVector::from_vec(center.clone());
        for (a, &k) in features.iter().enumerate() {
            x[k] = axes[a][idx[a]];
        }
        let feat = features.iter().map(|&k| x[k]).collect();
        set.push(feat, dist.eval(&x).iter().copied().collect(), if offset { "held-out-grid" } else { "grid" });
        let mut a = 0;
        loop {
            if a == axes.len() {
                return set;
            }
            idx[a] += 1;
            if idx[a] < axes[a].len() {
                break;
            }
            idx[a] = 0;
            a += 1;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetTiers {
    pub poor: TrainingSet,
    pub moderate: TrainingSet,
    pub good: TrainingSet,
}

impl DatasetTiers {
    pub fn get(&self, tier: Tier) -> Option<&TrainingSet> {
        match tier {
            Tier::None => None,
            Tier::Poor => Some(&self.poor),
            Tier::Moderate => Some(&self.moderate),
            Tier::Good => Some(&self.good),
        }
    }
}

/// Shared settings of every run in an experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunDefaults {
    pub dt: f64,
    pub model: QuadrotorParams,
    pub estimator: EstimatorConfig,
    pub planner: PlannerConfig,
    pub geodesic: GeodesicSolverConfig,
    pub mode: RunMode,
    /// Controller bound; calibrated on the no-learning runs when absent.
    pub delta: Option<f64>,
}

impl Default for RunDefaults {
    fn default() -> Self {
        Self {
            dt: 5e-4,
            model: QuadrotorParams::default(),
            estimator: EstimatorConfig::default(),
            planner: PlannerConfig::default(),
            geodesic: GeodesicSolverConfig::default(),
            mode: RunMode::Acceptance,
            delta: None,
        }
    }
}

impl RunDefaults {
    /// Scenario for one run with a fixed controller bound.
    pub fn scenario(&self, name: &str, task: &TaskSpec, kind: ControllerKind, delta: f64) -> ScenarioConfig {
        let mut cfg = ScenarioConfig::new(name, task.clone());
        cfg.dt = self.dt;
        cfg.model = self.model;
        cfg.estimator = self.estimator;
        cfg.planner = self.planner;
        cfg.geodesic = self.geodesic;
        cfg.mode = self.mode;
        cfg.controller.kind = kind;
        cfg.controller.delta_source = DeltaSource::Fixed;
        cfg.controller.delta = Some(delta);
        cfg
    }
}

/// Empirical bound over the no-learning versions of `tasks`.
pub fn calibrate_delta(defaults: &RunDefaults, tasks: &[TaskSpec]) -> Result<f64, SimError> {
    let scenarios = tasks
        .iter()
        .map(|t| Scenario::resolve(&defaults.scenario(&format!("{}-calibration", t.name), t, ControllerKind::RdCcm, 0.0)))
        .collect::<Result<Vec<_>, _>>()?;
    empirical_eeb_calibration(&scenarios, defaults.estimator.safety_factor)
}

fn checked_run(sc: &Scenario) -> Result<TrajectoryLog, SimError> {
    let out = run_scenario(sc)?;
    match out.log.failure {
        Some(f) => Err(SimError::Log(format!("{} diverged: {f}", sc.name))),
        None => Ok(out.log),
    }
}

/// Poor: RD-CCM runs of the tasks without learning. Moderate: poor plus the
/// same tasks replanned with a `|v_z|` cap. Good: the true disturbance on a
/// feature grid.
pub fn make_dataset_tiers(
    defaults: &RunDefaults,
    tasks: &[TaskSpec],
    cfg: &TierConfig,
    delta: f64,
) -> Result<DatasetTiers, SimError> {
    let model = quadrotor_model(defaults.model)?;
    cfg.validate(&model)?;
    let names = cfg.feature_names(&model);
    let mut explore = defaults.clone();
    explore.mode = RunMode::Exploratory;
    let mut poor = TrainingSet { feature_names: names.clone(), ..TrainingSet::default() };
    for t in tasks {
        let sc = Scenario::resolve(&explore.scenario(&format!("{}-poor-data", t.name), t, ControllerKind::RdCcm, delta))?;
        poor.extend(&samples_from_log(&checked_run(&sc)?, &cfg.features, &names, cfg.sample_stride));
    }
    let mut moderate = poor.clone();
    explore.planner.vz_limit = Some(cfg.moderate_vz_limit);
    for t in tasks {
        let sc =
            Scenario::resolve(&explore.scenario(&format!("{}-moderate-data", t.name), t, ControllerKind::RdCcm, delta))?;
        moderate.extend(&samples_from_log(&checked_run(&sc)?, &cfg.features, &names, cfg.sample_stride));
    }
    let good = grid_samples(&model, &cfg.features, &names, &cfg.good_grid, false);
    Ok(DatasetTiers { poor, moderate, good })
}

pub fn train_tier(data: &TrainingSet, cfg: &TierConfig, model: &SystemModel) -> Result<SnMlp, SimError> {
    let mut net = cfg.network(model)?;
    train(&mut net, data, &cfg.train)?;
    Ok(net)
}

/// A matrix description (TOML).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatrixConfig {
    pub schema: String,
    pub name: String,
    #[serde(default = "paper_tasks")]
    pub tasks: Vec<TaskSpec>,
    #[serde(default = "all_tiers")]
    pub tiers: Vec<Tier>,
    #[serde(default = "compared_controllers")]
    pub controllers: Vec<ControllerKind>,
    /// Pretrained tier models; missing tiers are trained.
    #[serde(default)]
    pub models: BTreeMap<Tier, PathBuf>,
    #[serde(default)]
    pub runs: RunDefaults,
    #[serde(default)]
    pub tier_data: TierConfig,
    /// Horizon override; each run otherwise lasts its plan's arrival time.
    #[serde(default)]
    pub horizon: Option<f64>,
}

fn all_tiers() -> Vec<Tier> {
    Tier::ALL.to_vec()
}

fn compared_controllers() -> Vec<ControllerKind> {
    vec![ControllerKind::RdCcm, ControllerKind::CcmLearned]
}

impl MatrixConfig {
    pub fn new(name: &str) -> Self {
        Self {
            schema: SCENARIO_SCHEMA.to_string(),
            name: name.to_string(),
            tasks: paper_tasks(),
            tiers: all_tiers(),
            controllers: compared_controllers(),
            models: BTreeMap::new(),
            runs: RunDefaults::default(),
            tier_data: TierConfig::default(),
            horizon: None,
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

    pub fn load(path: impl AsRef<Path>) -> Result<Self, SimError> {
        let path = path.as_ref();
        let mut cfg = Self::from_toml(&std::fs::read_to_string(path)?)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in cfg.models.values_mut() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if self.tasks.is_empty() || self.tiers.is_empty() || self.controllers.is_empty() {
            return Err(SimError::Config("matrix needs tasks, tiers and controllers".into()));
        }
        if !(self.runs.dt > 0.0) {
            return Err(SimError::Config("dt must be positive".into()));
        }
        steps_per_sample(self.runs.estimator.period, self.runs.dt)?;
        if let Some(h) = self.horizon {
            if !(h >= self.runs.dt) {
                return Err(SimError::Config("horizon must be at least one step".into()));
            }
        }
        Ok(())
    }
}

/// Learned model per tier; `None` for the no-learning tier.
pub type TierModels = BTreeMap<Tier, Option<Arc<SnMlp>>>;

/// Loads configured models and trains the rest from freshly generated data.
pub fn prepare_tier_models(cfg: &MatrixConfig, delta: f64) -> Result<(TierModels, Option<DatasetTiers>), SimError> {
    let model = quadrotor_model(cfg.runs.model)?;
    let mut models = TierModels::new();
    let mut missing = vec![];
    for &tier in &cfg.tiers {
        match (tier, cfg.models.get(&tier)) {
            (Tier::None, _) => {
                models.insert(tier, None);
            }
            (_, Some(p)) => {
                models.insert(tier, Some(Arc::new(SnMlp::load(p)?)));
            }
            (_, None) => missing.push(tier),
        }
    }
    if missing.is_empty() {
        return Ok((models, None));
    }
    let data = make_dataset_tiers(&cfg.runs, &cfg.tasks, &cfg.tier_data, delta)?;
    for tier in missing {
        let set = data.get(tier).expect("learned tier");
        log::info!("training the {} model on {} samples", tier.label(), set.len());
        models.insert(tier, Some(Arc::new(train_tier(set, &cfg.tier_data, &model)?)));
    }
    Ok((models, Some(data)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixCell {
    pub task: String,
    pub tier: Tier,
    pub controller: ControllerKind,
    pub summary: RunSummary,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatrixResult {
    pub delta: f64,
    pub cells: Vec<MatrixCell>,
    pub logs: Vec<TrajectoryLog>,
    pub plans: BTreeMap<(String, Tier), Arc<PlannedTrajectory>>,
}

impl MatrixResult {
    pub fn cell(&self, task: &str, tier: Tier, controller: ControllerKind) -> Option<&MatrixCell> {
        self.cells.iter().find(|c| c.task == task && c.tier == tier && c.controller == controller)
    }

    pub fn breaches(&self) -> Vec<String> {
        self.cells
            .iter()
            .flat_map(|c| c.summary.breaches.iter().map(move |b| format!("{}: {b}", c.summary.name)))
            .collect()
    }

    /// Closed-loop cost per (task, tier) for one controller.
    pub fn cost_table(&self, controller: ControllerKind) -> BTreeMap<(String, Tier), f64> {
        self.cells
            .iter()
            .filter(|c| c.controller == controller)
            .map(|c| ((c.task.clone(), c.tier), c.summary.cost))
            .collect()
    }
}

/// Thread pool honoring `RCCM_THREADS`.
pub fn thread_pool() -> Result<rayon::ThreadPool, SimError> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .trim()
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| SimError::Config(format!("{THREADS_ENV} must be a positive integer, got {v:?}")))?;
        b = b.num_threads(n);
    }
    b.build().map_err(|e| SimError::Config(e.to_string()))
}

pub fn cell_name(task: &str, tier: Tier, controller: ControllerKind) -> String {
    format!("{task}-{}-{}", tier.label(), controller.label())
}

/// Runs every (task, tier, controller) cell. Both controllers of a
/// (task, tier) pair track the same plan. A cell whose run fails is kept
/// with its failure recorded.
pub fn run_experiment_matrix(cfg: &MatrixConfig, models: &TierModels, delta: f64) -> Result<MatrixResult, SimError> {
    cfg.validate()?;
    let params = cfg.runs.model;
    let model = quadrotor_model(params)?;
    let pool = thread_pool()?;
    let pairs: Vec<(&TaskSpec, Tier)> =
        cfg.tasks.iter().flat_map(|t| cfg.tiers.iter().map(move |&tier| (t, tier))).collect();
    let learned = |tier: Tier| -> Result<Arc<dyn UncertaintyModel>, SimError> {
        match models.get(&tier) {
            Some(Some(m)) => Ok(m.clone() as Arc<dyn UncertaintyModel>),
            Some(None) => Ok(Arc::new(crate::dynamics::NoLearning { input_dim: model.input_dim() })),
            None => Err(SimError::Config(format!("no model for tier {}", tier.label()))),
        }
    };
    let plans: Vec<Arc<PlannedTrajectory>> = pool.install(|| {
        pairs
            .par_iter()
            .map(|(task, tier)| {
                let dhat = learned(*tier)?;
                Ok(Arc::new(plan_flat(&params, &model, task, dhat.as_ref(), &cfg.runs.planner)?))
            })
            .collect::<Result<Vec<_>, SimError>>()
    })?;
    let jobs: Vec<(usize, ControllerKind)> =
        (0..pairs.len()).flat_map(|i| cfg.controllers.iter().map(move |&c| (i, c))).collect();
    let outputs = pool.install(|| {
        jobs.par_iter()
            .map(|&(i, kind)| {
                let (task, tier) = pairs[i];
                let name = cell_name(&task.name, tier, kind);
                let mut sc_cfg = cfg.runs.scenario(&name, task, kind, delta);
                sc_cfg.horizon = cfg.horizon;
                let sc = Scenario::resolve_with(&sc_cfg, Some(learned(tier)?), Some(plans[i].clone()))?;
                run_scenario(&sc)
            })
            .collect::<Result<Vec<_>, SimError>>()
    })?;
    let mut result = MatrixResult { delta, cells: vec![], logs: vec![], plans: BTreeMap::new() };
    for (i, plan) in plans.into_iter().enumerate() {
        result.plans.insert((pairs[i].0.name.clone(), pairs[i].1), plan);
    }
    for ((i, kind), out) in jobs.into_iter().zip(outputs) {
        let (task, tier) = pairs[i];
        result.cells.push(MatrixCell { task: task.name.clone(), tier, controller: kind, summary: out.summary });
        result.logs.push(out.log);
    }
    Ok(result)
}

/// Calibrates (unless configured), prepares the tier models and runs the
/// matrix.
pub fn run_experiment(cfg: &MatrixConfig) -> Result<(MatrixResult, TierModels), SimError> {
    cfg.validate()?;
    // reject a malformed thread cap before the long calibration runs
    thread_pool()?;
    let delta = match cfg.runs.delta {
        Some(d) => d,
        None => calibrate_delta(&cfg.runs, &cfg.tasks)?,
    };
    log::info!("controller bound delta = {delta:.4}");
    let (models, _) = prepare_tier_models(cfg, delta)?;
    let result = run_experiment_matrix(cfg, &models, delta)?;
    Ok((result, models))
}

/// Per-log figures that need nothing but the log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportEntry {
    pub name: String,
    pub rows: usize,
    pub duration: f64,
    pub cost: f64,
    pub energy_decay_slope: Option<f64>,
    pub eeb_violations: usize,
    pub max_estimation_error: f64,
    pub saturation_events: usize,
    pub geodesic_failures: usize,
    pub max_position_deviation: f64,
}

impl ReportEntry {
    pub fn from_log(log: &TrajectoryLog) -> Self {
        let rows = &log.rows;
        let max = |it: &mut dyn Iterator<Item = f64>| it.fold(0.0f64, f64::max);
        Self {
            name: log.name.clone(),
            rows: rows.len(),
            duration: rows.last().map_or(0.0, |r| r.t) - rows.first().map_or(0.0, |r| r.t),
            cost: log.cost(),
            energy_decay_slope: energy_decay_slope(log),
            eeb_violations: rows.iter().filter(|r| r.estimation_error() > r.delta_theory).count(),
            max_estimation_error: max(&mut rows.iter().map(|r| r.estimation_error())),
            saturation_events: rows.iter().filter(|r| r.saturated).count(),
            geodesic_failures: rows.iter().filter(|r| !r.geodesic_converged).count(),
            max_position_deviation: max(&mut rows.iter().map(|r| r.position_deviation())),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub entries: Vec<ReportEntry>,
}

impl Report {
    pub fn from_logs(logs: &[TrajectoryLog]) -> Self {
        Self { entries: logs.iter().map(ReportEntry::from_log).collect() }
    }

    pub fn to_markdown(&self) -> String {
        let mut s = String::from("# Run summary\n\n");
        if self.entries.is_empty() {
            s.push_str("No runs.\n");
            return s;
        }
        s.push_str("| run | duration (s) | cost J | log E slope | EEB violations | max est. error | saturation events | unconverged geodesics | max deviation (m) |\n");
        s.push_str("|---|---|---|---|---|---|---|---|---|\n");
        for e in &self.entries {
            let slope = e.energy_decay_slope.map_or("-".to_string(), |v| format!("{v:.3}"));
            let _ = writeln!(
                s,
                "| {} | {:.3} | {:.3} | {} | {} | {:.3e} | {} | {} | {:.4} |",
                e.name,
                e.duration,
                e.cost,
                slope,
                e.eeb_violations,
                e.max_estimation_error,
                e.saturation_events,
                e.geodesic_failures,
                e.max_position_deviation
            );
        }
        s
    }
}

/// Writes one CSV per log plus `summary.md` and `summary.json` into `dir`.
pub fn emit_report(logs: &[TrajectoryLog], dir: impl AsRef<Path>) -> Result<Report, SimError> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    for log in logs {
        log.save(dir.join(format!("{}.csv", log.name)))?;
    }
    let report = Report::from_logs(logs);
    std::fs::write(dir.join("summary.md"), report.to_markdown())?;
    let json = serde_json::to_string_pretty(&report).map_err(|e| SimError::Log(e.to_string()))?;
    std::fs::write(dir.join("summary.json"), json)?;
    Ok(report)
}

/// Reads every `*.csv` log in `dir`, sorted by file name.
pub fn read_logs(dir: impl AsRef<Path>) -> Result<Vec<TrajectoryLog>, SimError> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    paths.sort();
    paths.iter().map(TrajectoryLog::load).collect()
}

/// Markdown table of closed-loop costs, tasks by tiers.
pub fn cost_table_markdown(result: &MatrixResult, controller: ControllerKind) -> String {
    let table = result.cost_table(controller);
    let mut tasks: Vec<&String> = table.keys().map(|(t, _)| t).collect();
    tasks.dedup();
    let tiers: Vec<Tier> = Tier::ALL.into_iter().filter(|t| table.keys().any(|(_, x)| x == t)).collect();
    let mut s = format!("Closed-loop cost J under {}\n\n| task |", controller.label());
    for t in &tiers {
        let _ = write!(s, " {} |", t.label());
    }
    s.push_str("\n|---|");
    s.push_str(&"---|".repeat(tiers.len()));
    s.push('\n');
    for task in tasks {
        let _ = write!(s, "| {task} |");
        for t in &tiers {
            match table.get(&(task.clone(), *t)) {
                Some(j) => {
                    let _ = write!(s, " {j:.3} |");
                }
                None => s.push_str(" - |"),
            }
        }
        s.push('\n');
    }
    s
}
