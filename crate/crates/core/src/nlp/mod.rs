//! Dense nonlinear programming: problem representation, derivative checks,
//! and an SQP solver with l1 feasibility restoration.

mod problem;
mod qp;
mod sqp;

pub use problem::{check_derivatives, Constraint, DerivativeReport, NlpProblem, Objective, SmoothFn};
pub use sqp::{feasibility_phase, solve, FeasibilityOutcome};

use serde::{Deserialize, Serialize};

/// Solver outcome.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Optimal,
    Infeasible,
    IterationLimit,
    NumericalFailure,
}

impl SolveStatus {
    /// Stable integer code used in CSV artifacts.
    pub fn code(self) -> u8 {
        match self {
            SolveStatus::Optimal => 0,
            SolveStatus::Infeasible => 1,
            SolveStatus::IterationLimit => 2,
            SolveStatus::NumericalFailure => 3,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SolveStatus::Optimal => "optimal",
            SolveStatus::Infeasible => "infeasible",
            SolveStatus::IterationLimit => "iteration_limit",
            SolveStatus::NumericalFailure => "numerical_failure",
        }
    }

    pub fn is_failure(self) -> bool {
        matches!(self, SolveStatus::IterationLimit | SolveStatus::NumericalFailure)
    }
}

impl std::fmt::Display for SolveStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverSettings {
    pub feas_tol: f64,
    pub opt_tol: f64,
    pub max_iterations: usize,
    /// Factor applied to the l1 merit penalty when it is too small.
    pub penalty_growth: f64,
    /// Starts: the provided guess, the zero vector, then uniform random.
    pub multistart_count: usize,
    pub seed: u64,
    /// Record a per-iteration trace in [`SolveResult::trace`].
    pub verbose: bool,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            feas_tol: 1e-6,
            opt_tol: 1e-6,
            max_iterations: 200,
            penalty_growth: 10.0,
            multistart_count: 3,
            seed: 0,
            verbose: false,
        }
    }
}

impl SolverSettings {
    pub fn validate(&self) -> Result<(), crate::Error> {
        if !(self.feas_tol > 0.0 && self.opt_tol > 0.0) {
            return Err(crate::Error::InvalidArgument("solver tolerances must be positive".into()));
        }
        if self.penalty_growth <= 1.0 {
            return Err(crate::Error::InvalidArgument("penalty_growth must exceed 1".into()));
        }
        if self.multistart_count == 0 || self.max_iterations == 0 {
            return Err(crate::Error::InvalidArgument(
                "multistart_count and max_iterations must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveResult {
    pub status: SolveStatus,
    pub z_opt: Vec<f64>,
    pub objective_value: f64,
    pub max_constraint_violation: f64,
    /// Stationarity and complementarity residual scaled by `1 + |grad f|_inf`.
    pub kkt_residual: f64,
    /// SQP iterations summed over all starts.
    pub iterations: usize,
    pub wall_time: f64,
    pub multipliers_eq: Vec<f64>,
    pub multipliers_ineq: Vec<f64>,
    /// Minimum l1 violation reached by restoration over all starts, set when
    /// the status is `Infeasible`.
    pub infeasibility_certificate: Option<f64>,
    pub starts_used: usize,
    /// `iteration merit violation step` lines when `verbose` is set.
    pub trace: Vec<String>,
}
