//! Experiment configuration schema.
//!
//! Configurations are TOML documents. Every table rejects unknown keys.

use std::collections::BTreeSet;
use std::path::PathBuf;

use dcbf_mpc::feasibility::GridAxis;
use dcbf_mpc::{
    barrier_halfspace, barrier_sphere, lyapunov_quadratic, triple_integrator, ControllerConfig,
    Formulation, OracleSettings, ScalarField, SolverSettings, SystemModel,
};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    /// Classify grid states for every controller and gamma.
    FeasibilityMap,
    /// One closed-loop rollout per controller.
    Rollout,
    /// One closed-loop rollout per controller and gamma.
    GammaSweep,
    /// Feasibility maps plus at least one declared assertion.
    SubsetCheck,
}

impl ExperimentKind {
    pub fn uses_grid(self) -> bool {
        matches!(self, ExperimentKind::FeasibilityMap | ExperimentKind::SubsetCheck)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BarrierKind {
    /// `h(x) = -x`.
    #[default]
    Halfspace,
    /// `h(x) = |x|^2 - 1`.
    Sphere,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    #[serde(default)]
    pub description: String,
    /// Seed of the solver's random multistart points.
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub barrier: BarrierKind,
    /// Decay rates swept for every controller with a barrier.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gammas: Option<Vec<f64>>,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub lyapunov: LyapunovConfig,
    #[serde(default)]
    pub solver: SolverSettings,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<GridConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rollout: Option<RolloutConfig>,
    #[serde(default)]
    pub oracle: OracleSettings,
    pub controllers: Vec<ControllerEntry>,
    #[serde(default)]
    pub assertions: Vec<Assertion>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub dt: f64,
    pub jerk_min: f64,
    pub jerk_max: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dt: 0.1,
            jerk_min: -1.0,
            jerk_max: 1.0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LyapunovConfig {
    /// Weight of `V(x) = x' P x`; identity when omitted.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub p: Option<Weight>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub x: GridAxis,
    pub v: GridAxis,
    pub a: GridAxis,
}

impl GridConfig {
    pub fn axes(&self) -> Vec<GridAxis> {
        vec![self.x, self.v, self.a]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RolloutConfig {
    pub x0: Vec<f64>,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_true")]
    pub warm_start: bool,
}

fn default_steps() -> usize {
    dcbf_mpc::simulator::DEFAULT_STEPS
}

fn default_true() -> bool {
    true
}

/// A scalar (`s I`), a diagonal, or a full row-major matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Weight {
    Scalar(f64),
    Diagonal(Vec<f64>),
    Full(Vec<Vec<f64>>),
}

impl Weight {
    pub fn to_matrix(&self, dim: usize, name: &str) -> Result<DMatrix<f64>, CliError> {
        match self {
            Weight::Scalar(s) => Ok(DMatrix::identity(dim, dim) * *s),
            Weight::Diagonal(d) => Ok(DMatrix::from_diagonal(&DVector::from_column_slice(d))),
            Weight::Full(rows) => {
                let n = rows.len();
                if rows.iter().any(|r| r.len() != n) {
                    return Err(CliError::Config(format!("{name} must be a square matrix")));
                }
                Ok(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
            }
        }
    }
}

/// A constant decay rate or one value per constrained step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Schedule {
    Constant(f64),
    Steps(Vec<f64>),
}

impl Schedule {
    fn to_vec(&self) -> Vec<f64> {
        match self {
            Schedule::Constant(v) => vec![*v],
            Schedule::Steps(v) => v.clone(),
        }
    }
}

/// One controller. Parameters left out take the library defaults; setting
/// a parameter the formulation does not use is an error.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControllerEntry {
    /// Label used in CSVs and assertions; defaults to the formulation name.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub formulation: Formulation,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub horizon: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub m_cbf: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub m_clf: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<Schedule>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<Schedule>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q: Option<Weight>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r: Option<Weight>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p_terminal: Option<Weight>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p_omega: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p_slack: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub h_input: Option<Weight>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gcbf_relative_degree: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub goal_state: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub omega_fixed: Option<f64>,
}

impl ControllerEntry {
    pub fn label(&self) -> String {
        self.name.clone().unwrap_or_else(|| self.formulation.to_string())
    }

    fn to_config(&self, model: &SystemModel) -> Result<ControllerConfig, CliError> {
        let (n, m) = (model.state_dim(), model.input_dim());
        let mat = |w: &Option<Weight>, dim: usize, name: &str| w.as_ref().map(|w| w.to_matrix(dim, name)).transpose();
        Ok(ControllerConfig {
            formulation: self.formulation,
            horizon: self.horizon,
            m_cbf: self.m_cbf,
            m_clf: self.m_clf,
            gamma: self.gamma.as_ref().map(Schedule::to_vec),
            alpha: self.alpha.as_ref().map(Schedule::to_vec),
            beta: self.beta,
            q: mat(&self.q, n, "q")?,
            r: mat(&self.r, m, "r")?,
            p_terminal: mat(&self.p_terminal, n, "p_terminal")?,
            p_omega: self.p_omega,
            p_slack: self.p_slack,
            h_input: mat(&self.h_input, m, "h_input")?,
            gcbf_relative_degree: self.gcbf_relative_degree,
            goal_state: self.goal_state.as_ref().map(|g| DVector::from_column_slice(g)),
            omega_fixed: self.omega_fixed,
        })
    }
}

fn default_safe_tol() -> f64 {
    1e-8
}

fn default_order_tol() -> f64 {
    1e-6
}

/// Checks evaluated after the experiment ran; the exit code is 0 only if
/// all of them pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "check", rename_all = "snake_case", deny_unknown_fields)]
pub enum Assertion {
    /// For every gamma, no state is feasible for `a` but not for `b`.
    Subset { a: String, b: String },
    /// Identical classification for every gamma.
    GammaInvariant { controller: String },
    /// Feasible sets grow with gamma.
    GammaMonotone { controller: String },
    /// No oracle-feasible state is classified Infeasible. An empty list
    /// audits every controller.
    OracleSound {
        #[serde(default)]
        controllers: Vec<String>,
    },
    /// Every rollout completes with optimal solves.
    AlwaysOptimal { controller: String },
    /// `h(x_t) >= -tol` along every logged state.
    Safe {
        controller: String,
        #[serde(default = "default_safe_tol")]
        tol: f64,
    },
    /// The first solve at `gamma` reports Infeasible.
    InfeasibleAtStart { controller: String, gamma: f64 },
    /// Smaller gamma gives pointwise larger `h` over the common prefix.
    SafetyOrdering {
        controller: String,
        #[serde(default = "default_order_tol")]
        tol: f64,
    },
    /// Reports when each rollout first became infeasible. Never fails.
    FirstInfeasibility { controller: String },
}

impl Assertion {
    fn needs_grid(&self) -> bool {
        matches!(
            self,
            Assertion::Subset { .. }
                | Assertion::GammaInvariant { .. }
                | Assertion::GammaMonotone { .. }
                | Assertion::OracleSound { .. }
        )
    }

    fn controllers(&self) -> Vec<&str> {
        match self {
            Assertion::Subset { a, b } => vec![a, b],
            Assertion::OracleSound { controllers } => controllers.iter().map(String::as_str).collect(),
            Assertion::GammaInvariant { controller }
            | Assertion::GammaMonotone { controller }
            | Assertion::AlwaysOptimal { controller }
            | Assertion::Safe { controller, .. }
            | Assertion::InfeasibleAtStart { controller, .. }
            | Assertion::SafetyOrdering { controller, .. }
            | Assertion::FirstInfeasibility { controller } => vec![controller],
        }
    }
}

/// One controller instance to run: an entry with its gamma filled in.
#[derive(Debug, Clone)]
pub struct RunSpec {
    pub controller: String,
    /// `None` for formulations without a barrier.
    pub gamma: Option<f64>,
    pub config: ControllerConfig,
}

/// A validated experiment, ready to run.
pub struct Plan {
    pub config: ExperimentConfig,
    pub model: SystemModel,
    pub barrier: ScalarField,
    pub lyapunov: ScalarField,
    pub runs: Vec<RunSpec>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    /// Checks the whole configuration and expands controllers over the
    /// gamma sweep.
    pub fn plan(self) -> Result<Plan, CliError> {
        let cfg = |msg: String| CliError::Config(msg);
        let m = &self.model;
        let model = triple_integrator(m.dt, m.jerk_min, m.jerk_max).map_err(|e| cfg(format!("model: {e}")))?;
        let barrier = match self.barrier {
            BarrierKind::Halfspace => barrier_halfspace(),
            BarrierKind::Sphere => barrier_sphere(),
        };
        let p = match &self.lyapunov.p {
            Some(w) => w.to_matrix(model.state_dim(), "lyapunov.p")?,
            None => DMatrix::identity(model.state_dim(), model.state_dim()),
        };
        let lyapunov = lyapunov_quadratic(p).map_err(|e| cfg(format!("lyapunov: {e}")))?;
        self.solver.validate().map_err(|e| cfg(format!("solver: {e}")))?;
        if self.oracle.levels < 2 || self.oracle.confirm_levels < 2 {
            return Err(cfg("oracle: at least two input levels are required".into()));
        }

        if self.controllers.is_empty() {
            return Err(cfg("at least one controller is required".into()));
        }
        let mut names = BTreeSet::new();
        for c in &self.controllers {
            if !names.insert(c.label()) {
                return Err(cfg(format!("duplicate controller name '{}'", c.label())));
            }
        }

        match self.kind {
            k if k.uses_grid() => {
                let grid = self.grid.as_ref().ok_or_else(|| cfg(format!("{k:?} needs a [grid] table")))?;
                for (name, axis) in [("x", grid.x), ("v", grid.v), ("a", grid.a)] {
                    axis.validate().map_err(|e| cfg(format!("grid.{name}: {e}")))?;
                }
                if self.rollout.is_some() {
                    return Err(cfg("[rollout] is not used by grid experiments".into()));
                }
            }
            _ => {
                let r = self.rollout.as_ref().ok_or_else(|| cfg("rollouts need a [rollout] table".into()))?;
                if r.x0.len() != model.state_dim() || r.x0.iter().any(|v| !v.is_finite()) {
                    return Err(cfg(format!("rollout.x0 must hold {} finite values", model.state_dim())));
                }
                if r.steps == 0 {
                    return Err(cfg("rollout.steps must be at least 1".into()));
                }
                if self.grid.is_some() {
                    return Err(cfg("[grid] is not used by rollout experiments".into()));
                }
            }
        }
        if let Some(g) = &self.gammas {
            if g.is_empty() {
                return Err(cfg("gammas must not be empty".into()));
            }
            if self.kind == ExperimentKind::Rollout && g.len() != 1 {
                return Err(cfg("a rollout takes a single gamma; use kind = \"gamma_sweep\"".into()));
            }
        } else if self.kind == ExperimentKind::GammaSweep {
            return Err(cfg("gamma_sweep needs a gammas list".into()));
        }
        if self.kind == ExperimentKind::SubsetCheck && self.assertions.is_empty() {
            return Err(cfg("subset_check needs at least one assertion".into()));
        }

        let mut runs = Vec::new();
        for (i, entry) in self.controllers.iter().enumerate() {
            let ctx = |e: String| cfg(format!("controllers[{i}] ({}): {e}", entry.label()));
            let base = entry.to_config(&model).map_err(|e| ctx(e.to_string()))?;
            let sweep = match (&self.gammas, entry.formulation.has_barrier()) {
                (Some(g), true) => {
                    if entry.gamma.is_some() {
                        return Err(ctx("gamma is set both here and in the top-level gammas".into()));
                    }
                    g.iter().map(|&v| Some(v)).collect()
                }
                _ => vec![None],
            };
            for g in sweep {
                let config = match g {
                    Some(v) => base.clone().with_gamma(v),
                    None => base.clone(),
                };
                let resolved = config.resolve(&model).map_err(|e| ctx(e.to_string()))?;
                let gamma = match g {
                    Some(v) => Some(v),
                    None => resolved.gamma.first().copied(),
                };
                runs.push(RunSpec {
                    controller: entry.label(),
                    gamma,
                    config,
                });
            }
        }

        for (i, a) in self.assertions.iter().enumerate() {
            let ctx = |e: String| cfg(format!("assertions[{i}]: {e}"));
            if a.needs_grid() != self.kind.uses_grid() {
                return Err(ctx(format!("{a:?} does not apply to a {:?} experiment", self.kind)));
            }
            for name in a.controllers() {
                if !names.contains(name) {
                    return Err(ctx(format!("unknown controller '{name}'")));
                }
            }
            let count = |name: &str| runs.iter().filter(|r| r.controller == name).count();
            match a {
                Assertion::GammaInvariant { controller }
                | Assertion::GammaMonotone { controller }
                | Assertion::SafetyOrdering { controller, .. }
                    if count(controller) < 2 =>
                {
                    return Err(ctx(format!("'{controller}' needs at least two gamma values")));
                }
                Assertion::InfeasibleAtStart { controller, gamma }
                    if !runs.iter().any(|r| &r.controller == controller && r.gamma == Some(*gamma)) =>
                {
                    return Err(ctx(format!("'{controller}' is not run with gamma = {gamma}")));
                }
                Assertion::Safe { tol, .. } | Assertion::SafetyOrdering { tol, .. } if !(*tol >= 0.0) => {
                    return Err(ctx("tol must be nonnegative".into()));
                }
                _ => {}
            }
        }

        Ok(Plan {
            config: self,
            model,
            barrier,
            lyapunov,
            runs,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"
kind = "gamma_sweep"
gammas = [0.05, 0.2]

[rollout]
x0 = [-2.0, 0.0, 1.0]
steps = 5

[[controllers]]
formulation = "cbf_nmpc"
"#;

    #[test]
    fn parses_and_expands_the_sweep() {
        let plan = ExperimentConfig::from_toml(BASE).unwrap().plan().unwrap();
        assert_eq!(plan.runs.len(), 2);
        assert_eq!(plan.runs[1].gamma, Some(0.2));
        assert_eq!(plan.runs[0].controller, "cbf_nmpc");
    }

    #[test]
    fn rejects_unknown_keys() {
        let text = BASE.replace("steps = 5", "steps = 5\nstepz = 3");
        assert!(matches!(ExperimentConfig::from_toml(&text), Err(CliError::Config(_))));
        let text = format!("{BASE}\n[[assertions]]\ncheck = \"safe\"\ncontroller = \"cbf_nmpc\"\ncolour = 1\n");
        assert!(ExperimentConfig::from_toml(&text).is_err());
    }

    #[test]
    fn decay_bound_is_reported() {
        let text = BASE.replace("[0.05, 0.2]", "[1.5]");
        let err = ExperimentConfig::from_toml(&text).unwrap().plan().err().unwrap();
        assert!(err.to_string().contains("decay-rate bound"), "{err}");
    }

    #[test]
    fn unused_parameter_is_rejected() {
        let text = BASE.replace("formulation = \"cbf_nmpc\"", "formulation = \"cbf_nmpc\"\np_terminal = 5.0");
        assert!(ExperimentConfig::from_toml(&text).unwrap().plan().is_err());
    }

    #[test]
    fn assertions_must_name_known_controllers() {
        let text = format!("{BASE}\n[[assertions]]\ncheck = \"safe\"\ncontroller = \"mpc_cbf\"\n");
        let err = ExperimentConfig::from_toml(&text).unwrap().plan().err().unwrap();
        assert!(err.to_string().contains("unknown controller"));
    }

    #[test]
    fn weights_accept_three_shapes() {
        assert_eq!(Weight::Scalar(2.0).to_matrix(2, "w").unwrap(), DMatrix::identity(2, 2) * 2.0);
        assert_eq!(Weight::Diagonal(vec![1.0, 3.0]).to_matrix(2, "w").unwrap()[(1, 1)], 3.0);
        assert!(Weight::Full(vec![vec![1.0, 0.0], vec![0.0]]).to_matrix(2, "w").is_err());
    }
}
