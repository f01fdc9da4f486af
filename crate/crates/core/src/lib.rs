//! Safety-critical model predictive control with discrete-time control
//! barrier functions (CBFs) and control Lyapunov functions (CLFs).
//!
//! The crate provides
//! - [`model`]: discrete dynamics, barrier and Lyapunov fields, and the
//!   triple-integrator benchmark;
//! - [`nlp`]: a dense SQP solver with an active-set QP subsolver and an
//!   l1 feasibility-restoration phase used to certify infeasibility;
//! - [`controllers`]: transcriptions of DCLF-DCBF, MPC-CBF, MPC-GCBF,
//!   CLF-NMPC and the decay-rate-relaxed CBF-NMPC / CLF-CBF-NMPC;
//! - [`simulator`]: closed-loop receding-horizon rollouts;
//! - [`feasibility`]: grid sampling of feasible states, set comparisons
//!   and a brute-force enumeration oracle.

// `!(a < b)` checks deliberately reject NaN; index loops mirror the math.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod controllers;
pub mod feasibility;
pub mod model;
pub mod nlp;
pub mod simulator;

mod clock;

/// Crate version, recorded in experiment manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub use controllers::{
    control_step, penalty_phi, penalty_psi, transcribe, ControlDecision, ControllerConfig,
    Formulation, Transcription,
};
pub use feasibility::{
    brute_force_feasible, compare, sample_grid, FeasibilityGrid, GridAxis, GridComparison,
    OracleSettings,
};
pub use model::{
    barrier_halfspace, barrier_sphere, lyapunov_quadratic, triple_integrator, FieldKind, InputVec,
    ScalarField, StateVec, SystemModel,
};
pub use nlp::{
    check_derivatives, feasibility_phase, solve, NlpProblem, SolveResult, SolveStatus,
    SolverSettings,
};
pub use simulator::{compare_gamma_sweep, rollout, TrajectoryLog};

/// Errors raised while building models, problems or controllers.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("invalid configuration: {0}")]
    InvalidConfiguration(String),
    #[error("grid axes do not match")]
    AxisMismatch,
    #[error("oracle: {0}")]
    Oracle(String),
}
