use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::model::SystemModel;
use crate::Error;

/// The six optimal-control formulations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Formulation {
    /// One-step CLF-CBF program over `(u, s)`.
    DclfDcbf,
    /// Fixed decay rate CBF constraint at every step of the horizon.
    MpcCbf,
    /// A single CBF constraint between step 0 and step `m`.
    MpcGcbf,
    /// CLF decrease constraints with slack, no barrier.
    ClfNmpc,
    /// CBF constraints with relaxed decay rates `omega_k (1 - gamma_k)`.
    CbfNmpc,
    /// Relaxed CBF constraints plus slacked CLF constraints.
    ClfCbfNmpc,
}

impl Formulation {
    pub const ALL: [Formulation; 6] = [
        Formulation::DclfDcbf,
        Formulation::MpcCbf,
        Formulation::MpcGcbf,
        Formulation::ClfNmpc,
        Formulation::CbfNmpc,
        Formulation::ClfCbfNmpc,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Formulation::DclfDcbf => "dclf_dcbf",
            Formulation::MpcCbf => "mpc_cbf",
            Formulation::MpcGcbf => "mpc_gcbf",
            Formulation::ClfNmpc => "clf_nmpc",
            Formulation::CbfNmpc => "cbf_nmpc",
            Formulation::ClfCbfNmpc => "clf_cbf_nmpc",
        }
    }

    /// Whether the formulation constrains the barrier at all.
    pub fn has_barrier(self) -> bool {
        self != Formulation::ClfNmpc
    }

    /// Formulations with decay-rate relaxation variables.
    pub fn is_relaxed(self) -> bool {
        matches!(self, Formulation::CbfNmpc | Formulation::ClfCbfNmpc)
    }

    fn uses(self, param: Param) -> bool {
        use Formulation::*;
        use Param::*;
        match param {
            Horizon | Q | R | Goal => self != DclfDcbf,
            MCbf | POmega | OmegaFixed => self.is_relaxed(),
            MClf => matches!(self, ClfNmpc | ClfCbfNmpc),
            Gamma => self.has_barrier(),
            Alpha | PSlack => matches!(self, DclfDcbf | ClfNmpc | ClfCbfNmpc),
            Beta => self == CbfNmpc,
            PTerminal => matches!(self, MpcCbf | MpcGcbf),
            HInput => self == DclfDcbf,
            RelativeDegree => self == MpcGcbf,
        }
    }
}

impl std::fmt::Display for Formulation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Formulation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        let key = s.to_ascii_lowercase().replace('-', "_");
        Formulation::ALL
            .into_iter()
            .find(|f| f.as_str() == key)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown formulation '{s}'")))
    }
}

#[derive(Clone, Copy)]
enum Param {
    Horizon,
    MCbf,
    MClf,
    Gamma,
    Alpha,
    Beta,
    Q,
    R,
    PTerminal,
    POmega,
    PSlack,
    HInput,
    RelativeDegree,
    Goal,
    OmegaFixed,
}

impl Param {
    fn name(self) -> &'static str {
        match self {
            Param::Horizon => "horizon",
            Param::MCbf => "m_cbf",
            Param::MClf => "m_clf",
            Param::Gamma => "gamma",
            Param::Alpha => "alpha",
            Param::Beta => "beta",
            Param::Q => "q",
            Param::R => "r",
            Param::PTerminal => "p_terminal",
            Param::POmega => "p_omega",
            Param::PSlack => "p_slack",
            Param::HInput => "h_input",
            Param::RelativeDegree => "gcbf_relative_degree",
            Param::Goal => "goal_state",
            Param::OmegaFixed => "omega_fixed",
        }
    }
}

pub const DEFAULT_HORIZON: usize = 8;
pub const DEFAULT_GAMMA: f64 = 0.1;
pub const DEFAULT_ALPHA: f64 = 0.1;
pub const DEFAULT_BETA: f64 = 1.0;
pub const DEFAULT_P_OMEGA: f64 = 1000.0;
pub const DEFAULT_P_SLACK: f64 = 1000.0;
pub const DEFAULT_RELATIVE_DEGREE: usize = 3;

/// Controller hyperparameters.
///
/// Every formulation-specific field is optional. Unset fields take the
/// defaults in [`ControllerConfig::resolve`]; setting a field the selected
/// formulation does not use is a configuration error.
#[derive(Debug, Clone, PartialEq)]
pub struct ControllerConfig {
    pub formulation: Formulation,
    /// Prediction horizon `N`.
    pub horizon: Option<usize>,
    /// Number of constrained CBF steps, `1 <= m_cbf <= N`.
    pub m_cbf: Option<usize>,
    /// Number of constrained CLF steps, `1 <= m_clf <= N`.
    pub m_clf: Option<usize>,
    /// One value (constant schedule) or one value per constrained step.
    pub gamma: Option<Vec<f64>>,
    pub alpha: Option<Vec<f64>>,
    /// Terminal weight on `V(x_N)`.
    pub beta: Option<f64>,
    pub q: Option<DMatrix<f64>>,
    pub r: Option<DMatrix<f64>>,
    pub p_terminal: Option<DMatrix<f64>>,
    pub p_omega: Option<f64>,
    pub p_slack: Option<f64>,
    pub h_input: Option<DMatrix<f64>>,
    pub gcbf_relative_degree: Option<usize>,
    pub goal_state: Option<DVector<f64>>,
    /// Pins every `omega_k` to this value instead of optimizing it.
    pub omega_fixed: Option<f64>,
}

impl ControllerConfig {
    pub fn new(formulation: Formulation) -> Self {
        Self {
            formulation,
            horizon: None,
            m_cbf: None,
            m_clf: None,
            gamma: None,
            alpha: None,
            beta: None,
            q: None,
            r: None,
            p_terminal: None,
            p_omega: None,
            p_slack: None,
            h_input: None,
            gcbf_relative_degree: None,
            goal_state: None,
            omega_fixed: None,
        }
    }

    pub fn with_horizon(mut self, n: usize) -> Self {
        self.horizon = Some(n);
        self
    }

    pub fn with_m_cbf(mut self, m: usize) -> Self {
        self.m_cbf = Some(m);
        self
    }

    pub fn with_m_clf(mut self, m: usize) -> Self {
        self.m_clf = Some(m);
        self
    }

    pub fn with_gamma(mut self, gamma: f64) -> Self {
        self.gamma = Some(vec![gamma]);
        self
    }

    pub fn with_alpha(mut self, alpha: f64) -> Self {
        self.alpha = Some(vec![alpha]);
        self
    }

    pub fn with_beta(mut self, beta: f64) -> Self {
        self.beta = Some(beta);
        self
    }

    pub fn with_omega_fixed(mut self, omega: f64) -> Self {
        self.omega_fixed = Some(omega);
        self
    }

    pub fn with_relative_degree(mut self, m: usize) -> Self {
        self.gcbf_relative_degree = Some(m);
        self
    }

    /// Names of the fields that are set.
    fn set_params(&self) -> Vec<Param> {
        let mut out = Vec::new();
        let mut push = |set: bool, p: Param| {
            if set {
                out.push(p);
            }
        };
        push(self.horizon.is_some(), Param::Horizon);
        push(self.m_cbf.is_some(), Param::MCbf);
        push(self.m_clf.is_some(), Param::MClf);
        push(self.gamma.is_some(), Param::Gamma);
        push(self.alpha.is_some(), Param::Alpha);
        push(self.beta.is_some(), Param::Beta);
        push(self.q.is_some(), Param::Q);
        push(self.r.is_some(), Param::R);
        push(self.p_terminal.is_some(), Param::PTerminal);
        push(self.p_omega.is_some(), Param::POmega);
        push(self.p_slack.is_some(), Param::PSlack);
        push(self.h_input.is_some(), Param::HInput);
        push(self.gcbf_relative_degree.is_some(), Param::RelativeDegree);
        push(self.goal_state.is_some(), Param::Goal);
        push(self.omega_fixed.is_some(), Param::OmegaFixed);
        out
    }

    pub fn validate(&self, model: &SystemModel) -> Result<(), Error> {
        self.resolve(model).map(|_| ())
    }

    /// Checks the configuration against `model` and fills in defaults:
    /// `N = 8`, `m_cbf = m_clf = N`, `gamma = alpha = 0.1`, `beta = 1`,
    /// `Q = diag(10, 1, 1)` (10 on the first state, 1 elsewhere), `R = I`,
    /// `P_terminal = 10 Q`, `P_omega = P_slack = 1000`, `H = I`, `m = 3`,
    /// goal at the origin.
    pub fn resolve(&self, model: &SystemModel) -> Result<Resolved, Error> {
        let f = self.formulation;
        for p in self.set_params() {
            if !f.uses(p) {
                return Err(invalid(format!("{} does not use parameter '{}'", f, p.name())));
            }
        }
        let n = model.state_dim();
        let m = model.input_dim();

        let horizon = if f == Formulation::DclfDcbf {
            1
        } else {
            self.horizon.unwrap_or(DEFAULT_HORIZON)
        };
        if horizon == 0 {
            return Err(invalid("horizon must be at least 1".into()));
        }
        let m_cbf = match f {
            Formulation::CbfNmpc | Formulation::ClfCbfNmpc => self.m_cbf.unwrap_or(horizon),
            Formulation::MpcCbf => horizon,
            Formulation::DclfDcbf => 1,
            Formulation::MpcGcbf | Formulation::ClfNmpc => 0,
        };
        if f.is_relaxed() && !(1..=horizon).contains(&m_cbf) {
            return Err(invalid(format!("m_cbf must lie in [1, {horizon}], got {m_cbf}")));
        }
        let m_clf = match f {
            Formulation::ClfNmpc | Formulation::ClfCbfNmpc => self.m_clf.unwrap_or(horizon),
            Formulation::DclfDcbf => 1,
            _ => 0,
        };
        if matches!(f, Formulation::ClfNmpc | Formulation::ClfCbfNmpc)
            && !(1..=horizon).contains(&m_clf)
        {
            return Err(invalid(format!("m_clf must lie in [1, {horizon}], got {m_clf}")));
        }
        let relative_degree = if f == Formulation::MpcGcbf {
            let d = self.gcbf_relative_degree.unwrap_or(DEFAULT_RELATIVE_DEGREE);
            if !(1..=horizon).contains(&d) {
                return Err(invalid(format!(
                    "gcbf_relative_degree must lie in [1, {horizon}], got {d}"
                )));
            }
            d
        } else {
            0
        };
        let gamma_steps = if f == Formulation::MpcGcbf { 1 } else { m_cbf };
        let gamma = schedule("gamma", self.gamma.as_deref(), DEFAULT_GAMMA, gamma_steps, f.has_barrier())?;
        let alpha = schedule("alpha", self.alpha.as_deref(), DEFAULT_ALPHA, m_clf, m_clf > 0)?;

        let beta = self.beta.unwrap_or(DEFAULT_BETA);
        if !(beta >= 0.0 && beta.is_finite()) {
            return Err(invalid(format!("beta must be nonnegative, got {beta}")));
        }
        let p_omega = self.p_omega.unwrap_or(DEFAULT_P_OMEGA);
        let p_slack = self.p_slack.unwrap_or(DEFAULT_P_SLACK);
        for (name, v) in [("p_omega", p_omega), ("p_slack", p_slack)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(invalid(format!("{name} must be positive, got {v}")));
            }
        }
        if let Some(w) = self.omega_fixed {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(invalid(format!("omega_fixed must be nonnegative, got {w}")));
            }
        }

        let q = match &self.q {
            Some(q) => q.clone(),
            None => {
                let mut q = DMatrix::identity(n, n);
                q[(0, 0)] = 10.0;
                q
            }
        };
        check_weight("q", &q, n, false)?;
        let r = self.r.clone().unwrap_or_else(|| DMatrix::identity(m, m));
        check_weight("r", &r, m, true)?;
        let p_terminal = self.p_terminal.clone().unwrap_or_else(|| &q * 10.0);
        check_weight("p_terminal", &p_terminal, n, false)?;
        let h_input = self.h_input.clone().unwrap_or_else(|| DMatrix::identity(m, m));
        check_weight("h_input", &h_input, m, true)?;
        let goal = self.goal_state.clone().unwrap_or_else(|| DVector::zeros(n));
        if goal.len() != n || goal.iter().any(|v| !v.is_finite()) {
            return Err(invalid(format!("goal_state must be a finite vector of length {n}")));
        }

        Ok(Resolved {
            formulation: f,
            horizon,
            m_cbf,
            m_clf,
            relative_degree,
            gamma,
            alpha,
            beta,
            q,
            r,
            p_terminal,
            p_omega,
            p_slack,
            h_input,
            goal,
            omega_fixed: self.omega_fixed,
        })
    }
}

/// A validated configuration with every default filled in.
#[derive(Debug, Clone, PartialEq)]
pub struct Resolved {
    pub formulation: Formulation,
    pub horizon: usize,
    pub m_cbf: usize,
    pub m_clf: usize,
    pub relative_degree: usize,
    /// One entry per constrained CBF step (one entry for MPC-GCBF).
    pub gamma: Vec<f64>,
    pub alpha: Vec<f64>,
    pub beta: f64,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub p_terminal: DMatrix<f64>,
    pub p_omega: f64,
    pub p_slack: f64,
    pub h_input: DMatrix<f64>,
    pub goal: DVector<f64>,
    pub omega_fixed: Option<f64>,
}

fn invalid(msg: String) -> Error {
    Error::InvalidConfiguration(msg)
}

fn schedule(name: &str, given: Option<&[f64]>, default: f64, steps: usize, used: bool) -> Result<Vec<f64>, Error> {
    if !used {
        return Ok(Vec::new());
    }
    let values = match given {
        None => vec![default; steps],
        Some([v]) => vec![*v; steps],
        Some(vs) if vs.len() == steps => vs.to_vec(),
        Some(vs) => {
            return Err(invalid(format!(
                "{name} has {} entries; expected 1 or {steps}",
                vs.len()
            )))
        }
    };
    for v in &values {
        if !(*v > 0.0 && *v <= 1.0) {
            return Err(invalid(format!(
                "{name} = {v} violates the decay-rate bound 0 < {name} <= 1"
            )));
        }
    }
    Ok(values)
}

fn check_weight(name: &str, w: &DMatrix<f64>, dim: usize, definite: bool) -> Result<(), Error> {
    if w.nrows() != dim || w.ncols() != dim {
        return Err(invalid(format!("{name} must be {dim}x{dim}")));
    }
    if w.iter().any(|v| !v.is_finite()) || (w - w.transpose()).amax() > 1e-12 * (1.0 + w.amax()) {
        return Err(invalid(format!("{name} must be finite and symmetric")));
    }
    let eig = w.clone().symmetric_eigen();
    let min = eig.eigenvalues.min();
    let tol = 1e-12 * (1.0 + w.amax());
    if (definite && min <= tol) || min < -tol {
        let need = if definite { "positive definite" } else { "positive semidefinite" };
        return Err(invalid(format!("{name} must be {need}")));
    }
    Ok(())
}

/// `psi(omega) = P_omega (omega - 1)^2`.
pub fn penalty_psi(omega: f64, p_omega: f64) -> f64 {
    p_omega * (omega - 1.0) * (omega - 1.0)
}

/// `phi(s) = P_slack s^2`.
pub fn penalty_phi(s: f64, p_slack: f64) -> f64 {
    p_slack * s * s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::triple_integrator;

    fn model() -> SystemModel {
        triple_integrator(0.1, -1.0, 1.0).unwrap()
    }

    #[test]
    fn defaults_resolve() {
        let r = ControllerConfig::new(Formulation::CbfNmpc).resolve(&model()).unwrap();
        assert_eq!(r.horizon, 8);
        assert_eq!(r.m_cbf, 8);
        assert_eq!(r.gamma, vec![0.1; 8]);
        assert_eq!(r.q[(0, 0)], 10.0);
        assert_eq!(r.p_terminal[(1, 1)], 10.0);
    }

    #[test]
    fn unused_parameter_rejected() {
        let c = ControllerConfig::new(Formulation::ClfNmpc).with_m_cbf(3);
        let err = c.resolve(&model()).unwrap_err();
        assert!(matches!(err, Error::InvalidConfiguration(ref m) if m.contains("m_cbf")), "{err}");
        let c = ControllerConfig::new(Formulation::DclfDcbf).with_horizon(8);
        assert!(c.resolve(&model()).is_err());
        let c = ControllerConfig::new(Formulation::MpcCbf).with_omega_fixed(1.0);
        assert!(c.resolve(&model()).is_err());
    }

    #[test]
    fn decay_rate_bounds() {
        for g in [0.0, -0.1, 1.5, f64::NAN] {
            let c = ControllerConfig::new(Formulation::MpcCbf).with_gamma(g);
            assert!(c.resolve(&model()).is_err(), "gamma {g}");
        }
        let c = ControllerConfig::new(Formulation::MpcCbf).with_gamma(1.0);
        assert!(c.resolve(&model()).is_ok());
        let c = ControllerConfig::new(Formulation::ClfNmpc).with_alpha(1.5);
        assert!(c.resolve(&model()).is_err());
    }

    #[test]
    fn horizon_limits() {
        let c = ControllerConfig::new(Formulation::CbfNmpc).with_horizon(4).with_m_cbf(5);
        assert!(c.resolve(&model()).is_err());
        let c = ControllerConfig::new(Formulation::MpcGcbf).with_horizon(2);
        assert!(c.resolve(&model()).is_err());
        let mut c = ControllerConfig::new(Formulation::MpcCbf);
        c.gamma = Some(vec![0.1, 0.2]);
        assert!(c.resolve(&model()).is_err());
    }

    #[test]
    fn weight_definiteness() {
        let mut c = ControllerConfig::new(Formulation::MpcCbf);
        c.r = Some(DMatrix::from_element(1, 1, 0.0));
        assert!(c.resolve(&model()).is_err());
        let mut c = ControllerConfig::new(Formulation::MpcCbf);
        c.q = Some(DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 0.0, 0.0])));
        assert!(c.resolve(&model()).is_ok());
    }

    #[test]
    fn penalties() {
        assert_eq!(penalty_psi(1.0, 123.0), 0.0);
        assert_eq!(penalty_psi(0.0, 100.0), 100.0);
        assert_eq!(penalty_phi(0.0, 5.0), 0.0);
        assert_eq!(penalty_phi(2.0, 5.0), 20.0);
    }

    #[test]
    fn formulation_names_round_trip() {
        for f in Formulation::ALL {
            assert_eq!(f.as_str().parse::<Formulation>().unwrap(), f);
        }
        assert_eq!("CBF-NMPC".parse::<Formulation>().unwrap(), Formulation::CbfNmpc);
        assert!("mpc".parse::<Formulation>().is_err());
    }
}
