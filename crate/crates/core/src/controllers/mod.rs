//! Transcription of the six CLF/CBF formulations into NLPs and the
//! receding-horizon control law.

mod config;
mod transcribe;

pub use config::{
    penalty_phi, penalty_psi, ControllerConfig, Formulation, Resolved, DEFAULT_ALPHA,
    DEFAULT_BETA, DEFAULT_GAMMA, DEFAULT_HORIZON, DEFAULT_P_OMEGA, DEFAULT_P_SLACK,
    DEFAULT_RELATIVE_DEGREE,
};
pub use transcribe::{transcribe, Transcription, VarLayout};

use nalgebra::DVector;

use crate::model::{InputVec, ScalarField, StateVec, SystemModel};
use crate::nlp::{self, SolveResult, SolveStatus, SolverSettings};
use crate::Error;

/// Outcome of one receding-horizon step.
#[derive(Debug, Clone)]
pub struct ControlDecision {
    /// First input block of the optimizer; `None` unless the solve is optimal.
    pub u_applied: Option<InputVec>,
    pub status: SolveStatus,
    pub omega_opt: Option<Vec<f64>>,
    pub slack_opt: Option<Vec<f64>>,
    /// `x_t, x_{t+1|t}, ..., x_{t+N|t}`.
    pub predicted_open_loop: Vec<StateVec>,
    /// Pre-check messages, e.g. a start outside the safe set.
    pub warnings: Vec<String>,
    pub result: SolveResult,
    /// Warm start for the following step.
    pub next_guess: Vec<f64>,
}

/// Solves the formulation at `x_t` and extracts the first input.
///
/// `warm_start`, when given, replaces the transcription's default initial
/// guess; pass the previous decision's `next_guess`.
pub fn control_step(
    config: &ControllerConfig,
    model: &SystemModel,
    h: &ScalarField,
    v: &ScalarField,
    x_t: &StateVec,
    settings: &SolverSettings,
    warm_start: Option<&[f64]>,
) -> Result<ControlDecision, Error> {
    let mut t = transcribe(config, model, h, v, x_t)?;
    let mut warnings = Vec::new();
    if config.formulation.has_barrier() && h.value(x_t.as_slice()) < 0.0 {
        let msg = format!(
            "h(x_t) = {:.3e} < 0: the state is outside the safe set",
            h.value(x_t.as_slice())
        );
        log::warn!("{msg}");
        warnings.push(msg);
    }
    if let Some(w) = warm_start {
        if w.len() != t.problem.num_vars {
            return Err(Error::InvalidArgument(format!(
                "warm start has {} entries; expected {}",
                w.len(),
                t.problem.num_vars
            )));
        }
        let mut guess = w.to_vec();
        t.problem.clamp_to_bounds(&mut guess);
        t.problem.initial_guess = guess;
    }
    let result = nlp::solve(&t.problem, settings);
    Ok(decision_from(&t, result, warnings))
}

fn decision_from(t: &Transcription, result: SolveResult, warnings: Vec<String>) -> ControlDecision {
    let optimal = result.status == SolveStatus::Optimal;
    let z = &result.z_opt;
    let l = &t.layout;
    let block = |r: &std::ops::Range<usize>| (optimal && !r.is_empty()).then(|| z[r.clone()].to_vec());
    ControlDecision {
        u_applied: optimal.then(|| DVector::from_column_slice(&z[l.input(0)])),
        status: result.status,
        omega_opt: block(&l.omega),
        slack_opt: block(&l.slack),
        predicted_open_loop: if optimal { t.predicted_states(z) } else { Vec::new() },
        warnings,
        next_guess: t.shifted_guess(z),
        result,
    }
}
