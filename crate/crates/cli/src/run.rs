//! Experiment execution and artifact writing.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use dcbf_mpc::controllers::Resolved;
use dcbf_mpc::feasibility::{sample_grid, PointStatus, GRID_CSV_HEADER};
use dcbf_mpc::simulator::{csv_header, rollout_with, write_sweep_csv};
use dcbf_mpc::StateVec;
use nalgebra::DMatrix;
use rayon::prelude::*;
use serde_json::{json, Value};

use crate::checks::{check_grids, check_rollouts, CheckResult, GridRun, RolloutRun};
use crate::config::{ExperimentConfig, Plan};
use crate::CliError;

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub out: Option<PathBuf>,
    pub jobs: Option<usize>,
    pub seed: Option<u64>,
    /// Preset name or config path, recorded in the manifest.
    pub source: String,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub out_dir: PathBuf,
    pub checks: Vec<CheckResult>,
}

impl RunOutcome {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

/// Runs the experiment and writes `grid.csv` or `trajectory.csv`,
/// `manifest.json` and `report.txt` into the output directory.
pub fn run_experiment(mut config: ExperimentConfig, opts: &RunOptions) -> Result<RunOutcome, CliError> {
    if let Some(seed) = opts.seed {
        config.seed = seed;
    }
    config.solver.seed = config.seed;
    if opts.jobs == Some(0) {
        return Err(CliError::Usage("--jobs must be at least 1".into()));
    }
    let out_dir = opts
        .out
        .clone()
        .or_else(|| config.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("runs").join(default_dir_name(&opts.source)));
    let plan = config.plan()?;
    fs::create_dir_all(&out_dir)?;

    let started = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
    let clock = Instant::now();
    let (files, checks, runs) = if plan.config.kind.uses_grid() {
        run_grids(&plan, opts, &out_dir)?
    } else {
        run_rollouts(&plan, opts, &out_dir)?
    };
    let total_seconds = clock.elapsed().as_secs_f64();

    let mut report = format!(
        "dcbf {} report\nsource: {}\nkind: {:?}\n",
        env!("CARGO_PKG_VERSION"),
        opts.source,
        plan.config.kind
    );
    if checks.is_empty() {
        report.push_str("no assertions declared\n");
    }
    for c in &checks {
        report.push_str(&c.line());
        report.push('\n');
    }
    let failed = checks.iter().filter(|c| !c.passed).count();
    report.push_str(&format!("summary: {} passed, {failed} failed\n", checks.len() - failed));
    fs::write(out_dir.join("report.txt"), &report)?;

    let manifest = json!({
        "tool": "dcbf",
        "version": env!("CARGO_PKG_VERSION"),
        "core_version": dcbf_mpc::VERSION,
        "source": opts.source,
        "started_unix_seconds": started,
        "total_seconds": total_seconds,
        "jobs": opts.jobs,
        "seed": plan.config.seed,
        "barrier": plan.barrier.label(),
        "lyapunov_p": plan.lyapunov.quadratic_weights().map(matrix_json),
        "config": plan.config,
        "runs": runs,
        "files": files,
        "assertions": checks,
        "passed": failed == 0,
    });
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| CliError::Internal(e.to_string()))?;
    fs::write(out_dir.join("manifest.json"), text + "\n")?;
    Ok(RunOutcome { out_dir, checks })
}

fn default_dir_name(source: &str) -> String {
    let stem = Path::new(source)
        .file_stem()
        .and_then(|s| s.to_str())
        .filter(|s| !s.is_empty())
        .unwrap_or("experiment");
    stem.to_string()
}

type Artifacts = (Vec<String>, Vec<CheckResult>, Vec<Value>);

fn run_grids(plan: &Plan, opts: &RunOptions, out_dir: &Path) -> Result<Artifacts, CliError> {
    let axes = plan.config.grid.as_ref().expect("validated").axes();
    let mut grids = Vec::new();
    let mut runs = Vec::new();
    for spec in &plan.runs {
        let grid = sample_grid(
            &spec.config,
            &plan.model,
            &plan.barrier,
            &plan.lyapunov,
            &axes,
            &plan.config.solver,
            opts.jobs,
        )?;
        log::info!(
            "{} gamma={:?}: {} feasible of {} in {:.1} s",
            spec.controller,
            spec.gamma,
            grid.feasible_count(),
            grid.points.len(),
            grid.metadata.total_seconds
        );
        runs.push(json!({
            "controller": spec.controller,
            "gamma": spec.gamma,
            "resolved": resolved_json(&spec.config.resolve(&plan.model)?),
            "config_digest": grid.metadata.config_digest,
            "feas_tol": grid.metadata.feas_tol,
            "seconds": grid.metadata.total_seconds,
            "points": grid.points.len(),
            "feasible": grid.feasible_count(),
            "infeasible": grid.count(PointStatus::Infeasible),
            "solver_failures": grid.count(PointStatus::SolverFailure),
            "excluded": grid.count(PointStatus::Excluded),
        }));
        grids.push(GridRun {
            spec: spec.clone(),
            grid,
        });
    }

    let mut csv = Vec::new();
    writeln!(csv, "controller,gamma,{GRID_CSV_HEADER}")?;
    for g in &grids {
        let mut body = Vec::new();
        g.grid.write_csv(&mut body)?;
        let gamma = g.spec.gamma.map_or(String::new(), |v| v.to_string());
        for line in String::from_utf8_lossy(&body).lines().skip(1) {
            writeln!(csv, "{},{gamma},{line}", g.spec.controller)?;
        }
    }
    fs::write(out_dir.join("grid.csv"), csv)?;

    let checks = check_grids(plan, &grids)?;
    Ok((vec!["grid.csv".into()], checks, runs))
}

fn run_rollouts(plan: &Plan, opts: &RunOptions, out_dir: &Path) -> Result<Artifacts, CliError> {
    let r = plan.config.rollout.as_ref().expect("validated");
    let x0 = StateVec::from_column_slice(&r.x0);
    let one = |spec: &crate::config::RunSpec| {
        let clock = Instant::now();
        let log = rollout_with(
            &spec.config,
            &plan.model,
            &plan.barrier,
            &plan.lyapunov,
            &x0,
            r.steps,
            &plan.config.solver,
            r.warm_start,
        )?;
        log::info!("{} gamma={:?}: {:?}", spec.controller, spec.gamma, log.outcome);
        Ok::<_, CliError>((log, clock.elapsed().as_secs_f64()))
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.jobs.unwrap_or(0))
        .build()
        .map_err(|e| CliError::Internal(format!("worker pool: {e}")))?;
    let results: Vec<_> = pool.install(|| plan.runs.par_iter().map(one).collect::<Result<Vec<_>, _>>())?;

    let mut logs = Vec::new();
    let mut runs = Vec::new();
    for (spec, (log, seconds)) in plan.runs.iter().zip(results) {
        runs.push(json!({
            "controller": spec.controller,
            "gamma": spec.gamma,
            "resolved": resolved_json(&spec.config.resolve(&plan.model)?),
            "seconds": seconds,
            "steps": log.records.len(),
            "outcome": log.outcome,
            "final_state": log.final_state,
        }));
        logs.push(RolloutRun {
            spec: spec.clone(),
            log,
        });
    }

    let mut csv = Vec::new();
    writeln!(csv, "controller,{}", csv_header(plan.model.state_dim(), true))?;
    for run in &logs {
        let mut body = Vec::new();
        write_sweep_csv(std::slice::from_ref(&run.log), &mut body)?;
        for line in String::from_utf8_lossy(&body).lines().skip(1) {
            let line = match run.spec.gamma {
                Some(_) => line.to_string(),
                // Drop the placeholder gamma of formulations without a barrier.
                None => line.split_once(',').map_or(String::new(), |(_, rest)| format!(",{rest}")),
            };
            writeln!(csv, "{},{line}", run.spec.controller)?;
        }
    }
    fs::write(out_dir.join("trajectory.csv"), csv)?;

    let checks = check_rollouts(plan, &logs);
    Ok((vec!["trajectory.csv".into()], checks, runs))
}

fn matrix_json(m: &DMatrix<f64>) -> Value {
    json!((0..m.nrows()).map(|i| m.row(i).iter().copied().collect::<Vec<_>>()).collect::<Vec<_>>())
}

/// Every parameter of the controller after defaults were applied.
fn resolved_json(r: &Resolved) -> Value {
    json!({
        "formulation": r.formulation,
        "horizon": r.horizon,
        "m_cbf": r.m_cbf,
        "m_clf": r.m_clf,
        "gcbf_relative_degree": r.relative_degree,
        "gamma": r.gamma,
        "alpha": r.alpha,
        "beta": r.beta,
        "q": matrix_json(&r.q),
        "r": matrix_json(&r.r),
        "p_terminal": matrix_json(&r.p_terminal),
        "p_omega": r.p_omega,
        "p_slack": r.p_slack,
        "h_input": matrix_json(&r.h_input),
        "goal_state": r.goal.iter().copied().collect::<Vec<_>>(),
        "omega_fixed": r.omega_fixed,
    })
}
