//! Evaluation of declared assertions against experiment results.

use dcbf_mpc::feasibility::{audit_grid, compare, FeasibilityGrid, PointStatus};
use dcbf_mpc::simulator::{RolloutOutcome, TrajectoryLog};
use dcbf_mpc::SolveStatus;
use serde::Serialize;

use crate::config::{Assertion, Plan, RunSpec};
use crate::CliError;

pub struct GridRun {
    pub spec: RunSpec,
    pub grid: FeasibilityGrid,
}

pub struct RolloutRun {
    pub spec: RunSpec,
    pub log: TrajectoryLog,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    /// Informational checks never fail.
    pub informational: bool,
    pub detail: String,
}

impl CheckResult {
    pub fn line(&self) -> String {
        let tag = match (self.informational, self.passed) {
            (true, _) => "INFO",
            (false, true) => "PASS",
            (false, false) => "FAIL",
        };
        format!("{tag} {}: {}", self.name, self.detail)
    }
}

fn fmt_gamma(g: Option<f64>) -> String {
    g.map_or_else(|| "-".into(), |g| format!("{g}"))
}

/// Runs of `name`, sorted by increasing gamma.
fn by_gamma<'a, T>(runs: &'a [T], spec: impl Fn(&T) -> &RunSpec, name: &str) -> Vec<&'a T> {
    let mut out: Vec<&T> = runs.iter().filter(|r| spec(r).controller == name).collect();
    out.sort_by(|a, b| spec(a).gamma.unwrap_or(0.0).total_cmp(&spec(b).gamma.unwrap_or(0.0)));
    out
}

pub fn check_grids(plan: &Plan, grids: &[GridRun]) -> Result<Vec<CheckResult>, CliError> {
    let mut out = Vec::new();
    for a in &plan.config.assertions {
        out.push(match a {
            Assertion::Subset { a, b } => subset(grids, a, b)?,
            Assertion::GammaInvariant { controller } => invariant(grids, controller),
            Assertion::GammaMonotone { controller } => monotone(grids, controller)?,
            Assertion::OracleSound { controllers } => oracle(plan, grids, controllers)?,
            _ => unreachable!("rejected by validation"),
        });
    }
    Ok(out)
}

fn subset(grids: &[GridRun], a: &str, b: &str) -> Result<CheckResult, CliError> {
    let mut total = 0;
    let mut parts = Vec::new();
    for ga in grids.iter().filter(|g| g.spec.controller == a) {
        let Some(gb) = grids
            .iter()
            .find(|g| g.spec.controller == b && (g.spec.gamma == ga.spec.gamma || g.spec.gamma.is_none()))
        else {
            continue;
        };
        let c = compare(&ga.grid, &gb.grid)?;
        total += c.subset_violations.len();
        parts.push(format!(
            "gamma={}: {} violations ({} vs {} feasible, {} failures)",
            fmt_gamma(ga.spec.gamma),
            c.subset_violations.len(),
            ga.grid.feasible_count(),
            gb.grid.feasible_count(),
            c.failures.len()
        ));
    }
    let compared = !parts.is_empty();
    Ok(CheckResult {
        name: format!("subset {a} <= {b}"),
        passed: compared && total == 0,
        informational: false,
        detail: if compared { parts.join("; ") } else { "no matching gamma values".into() },
    })
}

fn invariant(grids: &[GridRun], name: &str) -> CheckResult {
    let runs = by_gamma(grids, |g| &g.spec, name);
    let first = &runs[0].grid;
    let mut flips = 0;
    let mut failures = 0;
    for i in 0..first.points.len() {
        let statuses: Vec<PointStatus> = runs.iter().map(|r| r.grid.points[i].status).collect();
        let feasible = statuses[0] == PointStatus::Feasible;
        let failed = statuses.contains(&PointStatus::SolverFailure);
        if failed {
            failures += 1;
        }
        let differs = statuses.iter().any(|s| (*s == PointStatus::Feasible) != feasible);
        if differs || (failed && statuses.iter().any(|s| *s != statuses[0])) {
            flips += 1;
        }
    }
    let counts: Vec<String> = runs
        .iter()
        .map(|r| format!("{}:{}", fmt_gamma(r.spec.gamma), r.grid.feasible_count()))
        .collect();
    CheckResult {
        name: format!("gamma invariance of {name}"),
        passed: flips == 0,
        informational: false,
        detail: format!(
            "{flips} points differ across {} gamma values (feasible counts {}; {failures} points with solver failures)",
            runs.len(),
            counts.join(", ")
        ),
    }
}

fn monotone(grids: &[GridRun], name: &str) -> Result<CheckResult, CliError> {
    let runs = by_gamma(grids, |g| &g.spec, name);
    let mut total = 0;
    let mut parts = Vec::new();
    for w in runs.windows(2) {
        let c = compare(&w[0].grid, &w[1].grid)?;
        total += c.subset_violations.len();
        parts.push(format!(
            "{} <= {}: {} violations",
            fmt_gamma(w[0].spec.gamma),
            fmt_gamma(w[1].spec.gamma),
            c.subset_violations.len()
        ));
    }
    let counts: Vec<String> = runs.iter().map(|r| r.grid.feasible_count().to_string()).collect();
    Ok(CheckResult {
        name: format!("gamma monotonicity of {name}"),
        passed: total == 0,
        informational: false,
        detail: format!("{} (feasible counts {})", parts.join("; "), counts.join(", ")),
    })
}

fn oracle(plan: &Plan, grids: &[GridRun], names: &[String]) -> Result<CheckResult, CliError> {
    let settings = &plan.config.oracle;
    let (mut checked, mut witnesses, mut unsound, mut failed, mut unresolved) = (0, 0, 0, 0, 0);
    for g in grids
        .iter()
        .filter(|g| names.is_empty() || names.contains(&g.spec.controller))
    {
        let audit = audit_grid(&g.grid, &g.spec.config, &plan.model, &plan.barrier, &plan.lyapunov, settings)?;
        log::info!(
            "oracle {} gamma={}: {} witnesses, {} unsound",
            g.spec.controller,
            fmt_gamma(g.spec.gamma),
            audit.oracle_feasible,
            audit.unsound.len()
        );
        checked += audit.checked;
        witnesses += audit.oracle_feasible;
        unsound += audit.unsound.len();
        failed += audit.failed.len();
        unresolved += audit.unresolved;
    }
    Ok(CheckResult {
        name: "oracle soundness".into(),
        passed: unsound == 0,
        informational: false,
        detail: format!(
            "{unsound} oracle-feasible points classified infeasible ({checked} points checked at {} levels, {witnesses} witnesses, {failed} solver failures on witnessed points, {unresolved} solver-feasible points without a witness at {} levels)",
            settings.levels, settings.confirm_levels
        ),
    })
}

pub fn check_rollouts(plan: &Plan, runs: &[RolloutRun]) -> Vec<CheckResult> {
    plan.config
        .assertions
        .iter()
        .map(|a| match a {
            Assertion::AlwaysOptimal { controller } => {
                let logs = by_gamma(runs, |r| &r.spec, controller);
                let parts: Vec<String> = logs
                    .iter()
                    .map(|r| format!("gamma={}: {}", fmt_gamma(r.spec.gamma), outcome(&r.log)))
                    .collect();
                CheckResult {
                    name: format!("{controller} optimal at every step"),
                    passed: logs.iter().all(|r| r.log.completed()),
                    informational: false,
                    detail: parts.join("; "),
                }
            }
            Assertion::Safe { controller, tol } => {
                let logs = by_gamma(runs, |r| &r.spec, controller);
                let parts: Vec<String> = logs
                    .iter()
                    .map(|r| format!("gamma={}: min h = {:.3e}", fmt_gamma(r.spec.gamma), min_h(&r.log)))
                    .collect();
                CheckResult {
                    name: format!("{controller} safe (h >= -{tol:e})"),
                    passed: logs.iter().all(|r| min_h(&r.log) >= -tol),
                    informational: false,
                    detail: parts.join("; "),
                }
            }
            Assertion::InfeasibleAtStart { controller, gamma } => {
                let r = runs
                    .iter()
                    .find(|r| &r.spec.controller == controller && r.spec.gamma == Some(*gamma))
                    .expect("validated");
                let passed = r.log.outcome
                    == RolloutOutcome::Halted {
                        step: 0,
                        status: SolveStatus::Infeasible,
                    };
                CheckResult {
                    name: format!("{controller} infeasible at t = 0 for gamma = {gamma}"),
                    passed,
                    informational: false,
                    detail: outcome(&r.log),
                }
            }
            Assertion::SafetyOrdering { controller, tol } => {
                let logs = by_gamma(runs, |r| &r.spec, controller);
                let mut worst = f64::NEG_INFINITY;
                let mut parts = Vec::new();
                for w in logs.windows(2) {
                    let (lo, hi) = (w[0].log.barrier_values(), w[1].log.barrier_values());
                    let n = lo.len().min(hi.len());
                    let gap = (0..n).map(|t| hi[t] - lo[t]).fold(f64::NEG_INFINITY, f64::max);
                    worst = worst.max(gap);
                    parts.push(format!(
                        "{} vs {}: {n} common steps, max excess {gap:.3e}",
                        fmt_gamma(w[0].spec.gamma),
                        fmt_gamma(w[1].spec.gamma)
                    ));
                }
                CheckResult {
                    name: format!("{controller} safety ordering (tol {tol:e})"),
                    passed: worst <= *tol,
                    informational: false,
                    detail: parts.join("; "),
                }
            }
            Assertion::FirstInfeasibility { controller } => {
                let logs = by_gamma(runs, |r| &r.spec, controller);
                let parts: Vec<String> = logs
                    .iter()
                    .map(|r| format!("gamma={}: {}", fmt_gamma(r.spec.gamma), outcome(&r.log)))
                    .collect();
                CheckResult {
                    name: format!("{controller} first infeasibility"),
                    passed: true,
                    informational: true,
                    detail: parts.join("; "),
                }
            }
            _ => unreachable!("rejected by validation"),
        })
        .collect()
}

fn min_h(log: &TrajectoryLog) -> f64 {
    log.barrier_values().into_iter().fold(f64::INFINITY, f64::min)
}

fn outcome(log: &TrajectoryLog) -> String {
    match log.outcome {
        RolloutOutcome::Completed => format!("completed {} steps", log.records.len()),
        RolloutOutcome::Halted { step, status } => {
            format!("{} at step {step} (t = {:.1} s)", status.as_str(), log.records[step].time)
        }
    }
}
