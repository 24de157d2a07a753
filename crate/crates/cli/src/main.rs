use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use log::{info, warn};
use rccm_core::controller::check_feasible_plan;
use rccm_core::dynamics::{quad_index as qi, quadrotor_model, NoLearning, QuadrotorParams, UncertaintyModel};
use rccm_core::experiment::{
    cost_table_markdown, emit_report, grid_samples, read_logs, run_experiment, samples_from_log, train_tier,
    MatrixConfig, Report, Tier, TierConfig,
};
use rccm_core::learner::{SnMlp, TrainingSet};
use rccm_core::metric::{quadrotor_metric, verify_dual_ccm, GridSpec, MetricPolynomial};
use rccm_core::planner::{paper_tasks, plan_flat, PlannerConfig, TaskSpec};
use rccm_core::sim::{run_scenario, RunMode, Scenario, ScenarioConfig};

/// Exit status when a run breaches an acceptance invariant.
const BREACH: u8 = 2;

/// Tolerance on the contraction margin and Killing residual.
const METRIC_TOL: f64 = 1e-8;

#[derive(Parser)]
#[command(name = "rccm", version, about = "Robust CCM tracking with disturbance estimation and learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check the dual CCM conditions of a metric file on a state grid.
    VerifyMetric {
        /// Metric file (rccm-metric/1), or `shipped` for the built-in quadrotor metric.
        metric: String,
        /// Points per axis over (phi, v_x, v_z, phi_dot), or a TOML grid file.
        grid: String,
        /// Write the report as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Plan a reference trajectory for a task.
    Plan {
        /// `task1`, `task2`, `task3` or a TOML task file.
        task: String,
        /// Learned model file (rccm-snmlp/1); no learning when absent.
        #[arg(long)]
        model: Option<PathBuf>,
        /// Cap on |v_z| along the plan.
        #[arg(long)]
        vz_limit: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a disturbance model from a directory of run logs.
    Train {
        /// Directory of CSV trajectory logs.
        logs: PathBuf,
        /// poor, moderate or good; good adds gridded samples of the true field.
        #[arg(long)]
        tier: String,
        /// TOML file with tier settings.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run one closed-loop scenario.
    Run {
        scenario: PathBuf,
        /// Directory for the log and summary.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the tasks x tiers x controllers experiment matrix.
    Matrix {
        matrix_config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Summarize a directory of logs.
    Report {
        logdir: PathBuf,
        /// Where to write the summary; defaults to the log directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::VerifyMetric { metric, grid, out } => verify_metric(&metric, &grid, out.as_deref()),
        Command::Plan { task, model, vz_limit, out } => plan(&task, model.as_deref(), vz_limit, out),
        Command::Train { logs, tier, config, out } => train(&logs, &tier, config.as_deref(), out),
        Command::Run { scenario, out } => run(&scenario, out),
        Command::Matrix { matrix_config, out } => matrix(&matrix_config, out),
        Command::Report { logdir, out } => report(&logdir, out),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(BREACH),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn load_metric(arg: &str) -> Result<MetricPolynomial> {
    if arg == "shipped" {
        return Ok(quadrotor_metric());
    }
    MetricPolynomial::load(arg).with_context(|| format!("reading metric {arg}"))
}

fn verify_metric(metric: &str, grid: &str, out: Option<&Path>) -> Result<bool> {
    let metric = load_metric(metric)?;
    let model = quadrotor_model(QuadrotorParams::default())?;
    let spec = match grid.parse::<usize>() {
        Ok(n) => GridSpec::over_state_box(&model, &[qi::PHI, qi::VX, qi::VZ, qi::PHI_DOT], n),
        Err(_) => toml::from_str(&std::fs::read_to_string(grid).with_context(|| format!("reading grid {grid}"))?)
            .with_context(|| format!("parsing grid {grid}"))?,
    };
    let report = verify_dual_ccm(&metric, &model, &spec)?;
    let ok = report.passes(METRIC_TOL) && report.alpha_consistent(&metric, 1e-9);
    println!("points checked       {}", report.points_checked);
    println!("lambda               {}", report.lambda);
    println!("contraction margin   {:.3e}", report.worst_contraction_margin);
    println!("Killing residual     {:.3e}", report.worst_killing_residual);
    println!("eig M on grid        [{:.5}, {:.3}]", report.alpha_bounds_found.0, report.alpha_bounds_found.1);
    println!("declared alpha       [{:.5}, {:.3}]", metric.alpha1, metric.alpha2);
    println!("min eig W            {:.5}", report.min_w_eigenvalue);
    println!("{}", if ok { "PASS" } else { "FAIL" });
    if let Some(p) = out {
        std::fs::write(p, serde_json::to_string_pretty(&report)?)?;
    }
    Ok(ok)
}

fn load_task(arg: &str) -> Result<TaskSpec> {
    if let Some(t) = paper_tasks().into_iter().find(|t| t.name == arg) {
        return Ok(t);
    }
    let text = std::fs::read_to_string(arg).with_context(|| format!("{arg} is neither a task name nor a file"))?;
    toml::from_str(&text).with_context(|| format!("parsing task {arg}"))
}

fn plan(task: &str, model_path: Option<&Path>, vz_limit: Option<f64>, out: Option<PathBuf>) -> Result<bool> {
    let task = load_task(task)?;
    let params = QuadrotorParams::default();
    let model = quadrotor_model(params)?;
    let dhat: Arc<dyn UncertaintyModel> = match model_path {
        Some(p) => Arc::new(SnMlp::load(p).with_context(|| format!("reading model {}", p.display()))?),
        None => Arc::new(NoLearning { input_dim: model.input_dim() }),
    };
    let cfg = PlannerConfig { vz_limit, ..PlannerConfig::default() };
    let p = plan_flat(&params, &model, &task, dhat.as_ref(), &cfg)?;
    let metric = quadrotor_metric();
    let x0 = task.initial_state();
    let feas = check_feasible_plan(&model, dhat.as_ref(), &p.t_grid, &p.x_star, &p.u_star, Some((&x0, &metric)));
    println!("arrival time         {:.3} s", p.arrival_time);
    println!("cost J               {:.3}", p.cost);
    println!("dynamics residual    {:.2e}", p.dynamics_residual(&model, dhat.as_ref()));
    println!("obstacle clearance   {:.3} m", p.clearance(&task.obstacles));
    println!("input margin         {:.3}", feas.input_margin);
    println!("state margin         {:.3}", feas.state_margin);
    if let Some(m) = feas.tube_margin {
        println!("tube margin          {m:.3}");
    }
    if !feas.passes() {
        warn!("plan fails the feasibility pre-checks");
    }
    let out = out.unwrap_or_else(|| PathBuf::from(format!("{}.plan", task.name)));
    p.save(&out)?;
    info!("wrote {}", out.display());
    Ok(true)
}

fn train(logs: &Path, tier: &str, config: Option<&Path>, out: Option<PathBuf>) -> Result<bool> {
    let tier = Tier::parse(tier).with_context(|| format!("unknown tier {tier:?}"))?;
    if tier == Tier::None {
        bail!("the none tier has no model");
    }
    let cfg: TierConfig = match config {
        Some(p) => toml::from_str(&std::fs::read_to_string(p)?).with_context(|| format!("parsing {}", p.display()))?,
        None => TierConfig::default(),
    };
    let model = quadrotor_model(QuadrotorParams::default())?;
    cfg.validate(&model)?;
    let names = cfg.feature_names(&model);
    let mut data = TrainingSet { feature_names: names.clone(), ..TrainingSet::default() };
    let runs = read_logs(logs).with_context(|| format!("reading logs in {}", logs.display()))?;
    for log in &runs {
        data.extend(&samples_from_log(log, &cfg.features, &names, cfg.sample_stride));
    }
    if tier == Tier::Good {
        data.extend(&grid_samples(&model, &cfg.features, &names, &cfg.good_grid, false));
    }
    if data.is_empty() {
        bail!("no training samples in {}", logs.display());
    }
    info!("training the {} model on {} samples from {} logs", tier.label(), data.len(), runs.len());
    let net = train_tier(&data, &cfg, &model)?;
    let held = grid_samples(&model, &cfg.features, &names, &cfg.good_grid, true);
    println!("training RMSE        {:.4}", data.rmse(&net));
    println!("held-out grid RMSE   {:.4}", held.rmse(&net));
    println!("Lipschitz bound      {:.6}", net.lipschitz_certificate());
    let out = out.unwrap_or_else(|| PathBuf::from(format!("{}.json", tier.label())));
    net.save(&out)?;
    info!("wrote {}", out.display());
    Ok(true)
}

fn run(path: &Path, out: Option<PathBuf>) -> Result<bool> {
    let cfg = ScenarioConfig::load(path).with_context(|| format!("reading scenario {}", path.display()))?;
    let sc = Scenario::resolve(&cfg)?;
    info!("{}: horizon {:.3} s, delta {:.4}", sc.name, sc.horizon, sc.delta);
    let result = run_scenario(&sc)?;
    let s = &result.summary;
    let dir = out.unwrap_or_else(|| PathBuf::from("runs").join(&cfg.name));
    emit_report(std::slice::from_ref(&result.log), &dir)?;
    std::fs::write(dir.join(format!("{}.summary.json", cfg.name)), serde_json::to_string_pretty(s)?)?;
    println!("cost J               {:.3} (planned {:.3})", s.cost, s.planned_cost);
    match s.energy_decay_slope {
        Some(v) => println!("log E slope          {v:.3}"),
        None => println!("log E slope          -"),
    }
    println!("max deviation        {:.4} m after {:.2} s", s.max_deviation_after_transient, s.transient_end);
    println!("max est. error       {:.3e} for t >= 0.1 s", s.max_estimation_error_settled);
    println!("state exits          {}", s.state_exits);
    println!("saturation events    {}", s.saturation_events);
    println!("unconverged solves   {}", s.geodesic_failures);
    for b in &s.breaches {
        warn!("breach: {b}");
    }
    info!("wrote {}", dir.display());
    Ok(cfg.mode == RunMode::Exploratory || s.passed())
}

fn matrix(path: &Path, out: Option<PathBuf>) -> Result<bool> {
    let cfg = MatrixConfig::load(path).with_context(|| format!("reading matrix {}", path.display()))?;
    let (result, models) = run_experiment(&cfg)?;
    let dir = out.unwrap_or_else(|| PathBuf::from(format!("matrix-{}", cfg.name)));
    emit_report(&result.logs, &dir)?;
    std::fs::create_dir_all(dir.join("models"))?;
    for (tier, m) in &models {
        if let Some(m) = m {
            m.save(dir.join("models").join(format!("{}.json", tier.label())))?;
        }
    }
    std::fs::create_dir_all(dir.join("plans"))?;
    for ((task, tier), p) in &result.plans {
        p.save(dir.join("plans").join(format!("{task}-{}.plan", tier.label())))?;
    }
    let mut tables = String::new();
    for &c in &cfg.controllers {
        tables.push_str(&cost_table_markdown(&result, c));
        tables.push('\n');
    }
    std::fs::write(dir.join("costs.md"), &tables)?;
    std::fs::write(dir.join("cells.json"), serde_json::to_string_pretty(&result.cells)?)?;
    println!("delta = {:.4}\n", result.delta);
    print!("{tables}");
    for c in &result.cells {
        if let Some(f) = &c.summary.failure {
            warn!("{} failed: {f}", c.summary.name);
        }
    }
    let breaches = result.breaches();
    for b in &breaches {
        warn!("breach: {b}");
    }
    info!("wrote {}", dir.display());
    Ok(cfg.runs.mode == RunMode::Exploratory || breaches.is_empty())
}

fn report(logdir: &Path, out: Option<PathBuf>) -> Result<bool> {
    let logs = read_logs(logdir).with_context(|| format!("reading logs in {}", logdir.display()))?;
    let dir = out.unwrap_or_else(|| logdir.to_path_buf());
    let report: Report = if dir == logdir {
        let r = Report::from_logs(&logs);
        std::fs::write(dir.join("summary.md"), r.to_markdown())?;
        std::fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&r)?)?;
        r
    } else {
        emit_report(&logs, &dir)?
    };
    print!("{}", report.to_markdown());
    Ok(true)
}
