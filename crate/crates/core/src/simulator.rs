//! Closed-loop receding-horizon simulation.

use std::io::{self, Write};

use serde::{Deserialize, Serialize};

use crate::controllers::{control_step, ControllerConfig};
use crate::model::{ScalarField, StateVec, SystemModel};
use crate::nlp::{SolveStatus, SolverSettings};
use crate::Error;

pub const DEFAULT_STEPS: usize = 100;

/// One closed-loop step: the state at `time` and the decision taken there.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub step: usize,
    pub time: f64,
    pub state: Vec<f64>,
    /// `None` when the solve was not optimal.
    pub input: Option<Vec<f64>>,
    pub h: f64,
    pub v: f64,
    pub status: SolveStatus,
    pub objective: f64,
    pub omega: Option<Vec<f64>>,
    pub slack: Option<Vec<f64>>,
    pub iterations: usize,
    pub solve_ms: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RolloutOutcome {
    Completed,
    /// Stopped at the first step whose solve was not optimal.
    Halted { step: usize, status: SolveStatus },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryLog {
    pub records: Vec<TrajectoryRecord>,
    /// State after the last applied input.
    pub final_state: Vec<f64>,
    pub final_h: f64,
    pub outcome: RolloutOutcome,
    pub gamma: Vec<f64>,
}

impl TrajectoryLog {
    pub fn completed(&self) -> bool {
        self.outcome == RolloutOutcome::Completed
    }

    /// Barrier values `h(x_0), ..., h(x_T)` including the final state when
    /// the rollout completed.
    pub fn barrier_values(&self) -> Vec<f64> {
        let mut out: Vec<f64> = self.records.iter().map(|r| r.h).collect();
        if self.completed() {
            out.push(self.final_h);
        }
        out
    }

    /// Time of the first non-optimal solve.
    pub fn first_failure_time(&self) -> Option<f64> {
        match self.outcome {
            RolloutOutcome::Halted { step, .. } => Some(self.records[step].time),
            RolloutOutcome::Completed => None,
        }
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(out, "{}", csv_header(self.state_dim(), false))?;
        for r in &self.records {
            write_record(&mut out, r, None)?;
        }
        Ok(())
    }

    fn state_dim(&self) -> usize {
        self.final_state.len()
    }
}

/// Trajectory CSV columns. With `sweep`, a leading `gamma` column.
pub fn csv_header(state_dim: usize, sweep: bool) -> String {
    let states: Vec<String> = if state_dim == 3 {
        vec!["x".into(), "v".into(), "a".into()]
    } else {
        (0..state_dim).map(|i| format!("s{i}")).collect()
    };
    let prefix = if sweep { "gamma," } else { "" };
    format!(
        "{prefix}step,time,{},u,h,V,status,objective,omega_0,slack_0,iterations,solve_ms",
        states.join(",")
    )
}

fn write_record<W: Write>(out: &mut W, r: &TrajectoryRecord, gamma: Option<f64>) -> io::Result<()> {
    if let Some(g) = gamma {
        write!(out, "{g},")?;
    }
    write!(out, "{},{:.10},", r.step, r.time)?;
    for s in &r.state {
        write!(out, "{s:e},")?;
    }
    let first = |v: &Option<Vec<f64>>| v.as_ref().and_then(|v| v.first()).map_or(String::new(), |x| format!("{x:e}"));
    writeln!(
        out,
        "{},{:e},{:e},{},{},{},{},{},{:.3}",
        first(&r.input),
        r.h,
        r.v,
        r.status.code(),
        if r.objective.is_finite() { format!("{:e}", r.objective) } else { String::new() },
        first(&r.omega),
        first(&r.slack),
        r.iterations,
        r.solve_ms
    )
}

/// Writes several logs produced by [`compare_gamma_sweep`] into one CSV.
pub fn write_sweep_csv<W: Write>(logs: &[TrajectoryLog], mut out: W) -> io::Result<()> {
    let dim = logs.first().map_or(3, |l| l.state_dim());
    writeln!(out, "{}", csv_header(dim, true))?;
    for log in logs {
        let g = log.gamma.first().copied().unwrap_or(f64::NAN);
        for r in &log.records {
            write_record(&mut out, r, Some(g))?;
        }
    }
    Ok(())
}

/// Runs `steps` receding-horizon steps from `x0`, warm-starting each solve
/// from the previous solution shifted by one step.
pub fn rollout(
    config: &ControllerConfig,
    model: &SystemModel,
    h: &ScalarField,
    v: &ScalarField,
    x0: &StateVec,
    steps: usize,
    settings: &SolverSettings,
) -> Result<TrajectoryLog, Error> {
    rollout_with(config, model, h, v, x0, steps, settings, true)
}

/// [`rollout`] with warm starting optional.
#[allow(clippy::too_many_arguments)]
pub fn rollout_with(
    config: &ControllerConfig,
    model: &SystemModel,
    h: &ScalarField,
    v: &ScalarField,
    x0: &StateVec,
    steps: usize,
    settings: &SolverSettings,
    warm_start: bool,
) -> Result<TrajectoryLog, Error> {
    if steps == 0 {
        return Err(Error::InvalidArgument("a rollout needs at least one step".into()));
    }
    let resolved = config.resolve(model)?;
    let mut x = x0.clone();
    let mut guess: Option<Vec<f64>> = None;
    let mut records = Vec::with_capacity(steps);
    let mut outcome = RolloutOutcome::Completed;
    for k in 0..steps {
        let d = control_step(config, model, h, v, &x, settings, guess.as_deref())?;
        let status = d.status;
        records.push(TrajectoryRecord {
            step: k,
            time: k as f64 * model.dt(),
            state: x.iter().copied().collect(),
            input: d.u_applied.as_ref().map(|u| u.iter().copied().collect()),
            h: h.value(x.as_slice()),
            v: v.value(x.as_slice()),
            status,
            objective: if status == SolveStatus::Optimal { d.result.objective_value } else { f64::NAN },
            omega: d.omega_opt.clone(),
            slack: d.slack_opt.clone(),
            iterations: d.result.iterations,
            solve_ms: d.result.wall_time * 1e3,
        });
        match d.u_applied {
            Some(u) => {
                x = model.step(&x, &u);
                if x.iter().any(|v| !v.is_finite()) {
                    return Err(Error::InvalidArgument(format!("model produced a non-finite state at step {k}")));
                }
                guess = warm_start.then_some(d.next_guess);
            }
            None => {
                outcome = RolloutOutcome::Halted { step: k, status };
                break;
            }
        }
    }
    Ok(TrajectoryLog {
        records,
        final_h: h.value(x.as_slice()),
        final_state: x.iter().copied().collect(),
        outcome,
        gamma: resolved.gamma,
    })
}

/// One rollout per constant `gamma`, everything else identical.
#[allow(clippy::too_many_arguments)]
pub fn compare_gamma_sweep(
    config: &ControllerConfig,
    model: &SystemModel,
    h: &ScalarField,
    v: &ScalarField,
    x0: &StateVec,
    steps: usize,
    gammas: &[f64],
    settings: &SolverSettings,
) -> Result<Vec<TrajectoryLog>, Error> {
    if gammas.is_empty() {
        return Err(Error::InvalidArgument("the gamma sweep is empty".into()));
    }
    gammas
        .iter()
        .map(|&g| {
            let c = config.clone().with_gamma(g);
            rollout(&c, model, h, v, x0, steps, settings)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::controllers::Formulation;
    use crate::model::{barrier_halfspace, lyapunov_quadratic, triple_integrator};
    use nalgebra::{DMatrix, DVector};

    fn setup() -> (SystemModel, ScalarField, ScalarField) {
        (
            triple_integrator(0.1, -1.0, 1.0).unwrap(),
            barrier_halfspace(),
            lyapunov_quadratic(DMatrix::identity(3, 3)).unwrap(),
        )
    }

    #[test]
    fn boundary_start_stays_safe() {
        let (m, h, v) = setup();
        let c = ControllerConfig::new(Formulation::CbfNmpc).with_gamma(0.1);
        let x0 = DVector::from_vec(vec![0.0, 0.0, 0.0]);
        let log = rollout(&c, &m, &h, &v, &x0, 15, &SolverSettings::default()).unwrap();
        assert!(log.completed());
        assert!(log.barrier_values().iter().all(|h| *h >= -1e-8));
        for (k, r) in log.records.iter().enumerate() {
            assert!((r.time - k as f64 * 0.1).abs() < 1e-12);
        }
    }

    #[test]
    fn halts_on_infeasible_step() {
        let (m, h, v) = setup();
        let c = ControllerConfig::new(Formulation::MpcCbf).with_gamma(0.05);
        let x0 = DVector::from_vec(vec![0.0, 2.0, 2.0]);
        let log = rollout(&c, &m, &h, &v, &x0, 10, &SolverSettings::default()).unwrap();
        assert_eq!(
            log.outcome,
            RolloutOutcome::Halted {
                step: 0,
                status: SolveStatus::Infeasible
            }
        );
        assert_eq!(log.records.len(), 1);
        assert!(log.records[0].input.is_none());
        assert_eq!(log.first_failure_time(), Some(0.0));
    }

    #[test]
    fn single_gamma_sweep_equals_rollout() {
        let (m, h, v) = setup();
        let c = ControllerConfig::new(Formulation::MpcCbf);
        let x0 = DVector::from_vec(vec![-2.0, 0.0, 1.0]);
        let s = SolverSettings::default();
        let sweep = compare_gamma_sweep(&c, &m, &h, &v, &x0, 5, &[0.2], &s).unwrap();
        let plain = rollout(&c.clone().with_gamma(0.2), &m, &h, &v, &x0, 5, &s).unwrap();
        assert_eq!(sweep.len(), 1);
        assert_eq!(sweep[0].barrier_values(), plain.barrier_values());
        assert!(compare_gamma_sweep(&c, &m, &h, &v, &x0, 5, &[], &s).is_err());
    }

    #[test]
    fn csv_has_fixed_columns() {
        let (m, h, v) = setup();
        let c = ControllerConfig::new(Formulation::CbfNmpc);
        let x0 = DVector::from_vec(vec![-2.0, 0.0, 1.0]);
        let log = rollout(&c, &m, &h, &v, &x0, 3, &SolverSettings::default()).unwrap();
        let mut buf = Vec::new();
        log.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let cols = text.lines().next().unwrap().split(',').count();
        for line in text.lines() {
            assert_eq!(line.split(',').count(), cols, "{line}");
        }
        assert_eq!(text.lines().count(), 4);
    }
}
