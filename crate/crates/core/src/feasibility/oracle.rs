use serde::{Deserialize, Serialize};

use super::{FeasibilityGrid, PointStatus};
use crate::controllers::{ControllerConfig, Formulation, Resolved};
use crate::model::{ScalarField, StateVec, SystemModel};
use crate::Error;

/// Tolerance on each directly checked constraint.
const CHECK_TOL: f64 = 1e-12;
/// A relaxed constraint is escaped through a large `omega_k` only when
/// `h(x_k)` is negative by more than this; rounding noise around
/// `h(x_k) = 0` does not count.
const ESCAPE_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleSettings {
    pub levels: usize,
    /// Levels used to re-examine points where the oracle and solver disagree.
    pub confirm_levels: usize,
    /// Budget on visited nodes of the input-sequence tree.
    pub max_nodes: u64,
}

impl Default for OracleSettings {
    fn default() -> Self {
        Self {
            levels: 5,
            confirm_levels: 9,
            max_nodes: 10_000_000,
        }
    }
}

/// A feasible input sequence found by enumeration.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleWitness {
    pub inputs: Vec<f64>,
    pub nodes_visited: u64,
}

/// Enumerates input sequences on a uniform `levels`-point grid over the
/// input bounds and checks every constraint of the formulation directly
/// by exact simulation.
///
/// Relaxed CBF constraints reduce to `h(x_{k+1}) >= 0` or `h(x_k) < 0`
/// (some `omega_k >= 0` satisfies them; the second case needs a margin of
/// 1e-9); CLF constraints are always
/// satisfiable through their slack. Returns `Ok(true)` as soon as a
/// sequence passes.
pub fn brute_force_feasible(
    config: &ControllerConfig,
    model: &SystemModel,
    h: &ScalarField,
    v: &ScalarField,
    x_t: &StateVec,
    input_levels: usize,
) -> Result<bool, Error> {
    let settings = OracleSettings {
        levels: input_levels,
        ..OracleSettings::default()
    };
    brute_force_search(config, model, h, v, x_t, input_levels, settings.max_nodes).map(|w| w.is_some())
}

/// Like [`brute_force_feasible`] but returns the witness sequence and
/// takes an explicit node budget.
pub fn brute_force_search(
    config: &ControllerConfig,
    model: &SystemModel,
    h: &ScalarField,
    _v: &ScalarField,
    x_t: &StateVec,
    input_levels: usize,
    max_nodes: u64,
) -> Result<Option<OracleWitness>, Error> {
    if model.input_dim() != 1 {
        return Err(Error::Oracle("enumeration requires a single input".into()));
    }
    if input_levels < 2 {
        return Err(Error::Oracle("at least two input levels are required".into()));
    }
    if h.dim() != model.state_dim() || x_t.len() != model.state_dim() {
        return Err(Error::InvalidArgument("dimension mismatch".into()));
    }
    let resolved = config.resolve(model)?;
    let (lo, hi) = (model.input_lower()[0], model.input_upper()[0]);
    let levels: Vec<f64> = (0..input_levels)
        .map(|i| lo + (hi - lo) * i as f64 / (input_levels - 1) as f64)
        .collect();
    let mut search = Search {
        resolved: &resolved,
        model,
        h,
        h0: h.value(x_t.as_slice()),
        levels: &levels,
        depth: search_depth(&resolved, model),
        nodes: 0,
        max_nodes,
        inputs: Vec::new(),
    };
    let x0: Vec<f64> = x_t.iter().copied().collect();
    match search.descend(&x0, search.h0, 0)? {
        true => Ok(Some(OracleWitness {
            inputs: search.inputs,
            nodes_visited: search.nodes,
        })),
        false => Ok(None),
    }
}

/// Result of checking a sampled grid against the enumeration oracle.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct OracleAudit {
    /// Points that were not excluded.
    pub checked: usize,
    /// Points with a witness at `levels`.
    pub oracle_feasible: usize,
    /// Indices with a witness (confirmed at `confirm_levels`) that the
    /// solver classified Infeasible.
    pub unsound: Vec<usize>,
    /// Indices with a witness where the solver failed numerically.
    pub failed: Vec<usize>,
    /// Solver-feasible points without a coarse witness that the finer
    /// pass found one for.
    pub refined: usize,
    /// Solver-feasible points still without a witness (or over budget)
    /// after the finer pass. Expected, as the oracle is conservative.
    pub unresolved: usize,
}

/// Runs the oracle on every non-excluded point of `grid`, re-examining
/// points where the oracle and the solver disagree at
/// `settings.confirm_levels`.
pub fn audit_grid(
    grid: &FeasibilityGrid,
    config: &ControllerConfig,
    model: &SystemModel,
    h: &ScalarField,
    v: &ScalarField,
    settings: &OracleSettings,
) -> Result<OracleAudit, Error> {
    let mut audit = OracleAudit::default();
    for (i, p) in grid.points.iter().enumerate() {
        if p.status == PointStatus::Excluded {
            continue;
        }
        audit.checked += 1;
        let x = StateVec::from_column_slice(&p.state);
        let coarse = brute_force_search(config, model, h, v, &x, settings.levels, settings.max_nodes)?.is_some();
        if coarse {
            audit.oracle_feasible += 1;
        }
        if coarse == p.feasible() {
            continue;
        }
        let fine = match brute_force_search(config, model, h, v, &x, settings.confirm_levels, settings.max_nodes) {
            Ok(w) => Some(w.is_some()),
            Err(Error::Oracle(_)) => None,
            Err(e) => return Err(e),
        };
        if coarse {
            // An exhausted budget on the finer pass leaves the coarse
            // witness standing.
            match (fine.unwrap_or(true), p.status) {
                (true, PointStatus::Infeasible) => audit.unsound.push(i),
                (true, PointStatus::SolverFailure) => audit.failed.push(i),
                _ => {}
            }
        } else if fine == Some(true) {
            audit.refined += 1;
        } else {
            audit.unresolved += 1;
        }
    }
    Ok(audit)
}

/// Steps beyond which no constraint remains.
fn search_depth(r: &Resolved, model: &SystemModel) -> usize {
    if model.state_lower().is_some() {
        return r.horizon;
    }
    match r.formulation {
        Formulation::DclfDcbf => 1,
        Formulation::MpcCbf => r.horizon,
        Formulation::MpcGcbf => r.relative_degree,
        Formulation::CbfNmpc | Formulation::ClfCbfNmpc => r.m_cbf,
        Formulation::ClfNmpc => 0,
    }
}

struct Search<'a> {
    resolved: &'a Resolved,
    model: &'a SystemModel,
    h: &'a ScalarField,
    h0: f64,
    levels: &'a [f64],
    depth: usize,
    nodes: u64,
    max_nodes: u64,
    inputs: Vec<f64>,
}

impl Search<'_> {
    /// Whether the transition `x_k -> x_{k+1}` (step index `k`) satisfies
    /// the barrier constraint attached to it.
    fn step_ok(&self, k: usize, h_prev: f64, h_next: f64) -> bool {
        let r = self.resolved;
        match r.formulation {
            Formulation::MpcCbf | Formulation::DclfDcbf => h_next >= (1.0 - r.gamma[k]) * h_prev - CHECK_TOL,
            Formulation::MpcGcbf => {
                let d = r.relative_degree;
                k + 1 != d || h_next >= (1.0 - r.gamma[0]).powi(d as i32) * self.h0 - CHECK_TOL
            }
            Formulation::CbfNmpc | Formulation::ClfCbfNmpc => {
                if k >= r.m_cbf {
                    return true;
                }
                let coef = 1.0 - r.gamma[k];
                match r.omega_fixed {
                    Some(w) => h_next >= w * coef * h_prev - CHECK_TOL,
                    None => h_next >= -CHECK_TOL || (coef > 0.0 && h_prev < -ESCAPE_TOL),
                }
            }
            Formulation::ClfNmpc => true,
        }
    }

    fn descend(&mut self, x: &[f64], h_prev: f64, k: usize) -> Result<bool, Error> {
        if k == self.depth {
            return Ok(true);
        }
        let mut next = vec![0.0; x.len()];
        for &u in self.levels {
            self.nodes += 1;
            if self.nodes > self.max_nodes {
                return Err(Error::Oracle(format!(
                    "node budget of {} exceeded",
                    self.max_nodes
                )));
            }
            self.model.step_into(x, &[u], &mut next);
            if !self.model.state_within_bounds(&next, CHECK_TOL) {
                continue;
            }
            let h_next = self.h.value(&next);
            if !self.step_ok(k, h_prev, h_next) {
                continue;
            }
            self.inputs.push(u);
            if self.descend(&next, h_next, k + 1)? {
                return Ok(true);
            }
            self.inputs.pop();
        }
        Ok(false)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{barrier_halfspace, barrier_sphere, lyapunov_quadratic, triple_integrator};
    use nalgebra::{DMatrix, DVector};

    fn fields() -> (SystemModel, ScalarField, ScalarField) {
        (
            triple_integrator(0.1, -1.0, 1.0).unwrap(),
            barrier_halfspace(),
            lyapunov_quadratic(DMatrix::identity(3, 3)).unwrap(),
        )
    }

    #[test]
    fn boundary_state_moving_out_is_infeasible() {
        let (m, h, v) = fields();
        let x = DVector::from_vec(vec![0.0, 2.0, 2.0]);
        let c = ControllerConfig::new(Formulation::MpcCbf).with_gamma(0.05);
        assert!(!brute_force_feasible(&c, &m, &h, &v, &x, 5).unwrap());
        let c = ControllerConfig::new(Formulation::CbfNmpc).with_gamma(0.05);
        assert!(!brute_force_feasible(&c, &m, &h, &v, &x, 5).unwrap());
    }

    #[test]
    fn equilibrium_is_feasible() {
        let (m, h, v) = fields();
        let x = DVector::from_vec(vec![-2.0, 0.0, 0.0]);
        for f in Formulation::ALL {
            let c = ControllerConfig::new(f);
            assert!(brute_force_feasible(&c, &m, &h, &v, &x, 5).unwrap(), "{f}");
        }
    }

    #[test]
    fn witness_satisfies_constraints() {
        let (m, h, v) = fields();
        let x = DVector::from_vec(vec![-1.0, 0.5, 0.0]);
        let c = ControllerConfig::new(Formulation::MpcCbf).with_gamma(0.2);
        let w = brute_force_search(&c, &m, &h, &v, &x, 5, 1_000_000).unwrap().unwrap();
        assert_eq!(w.inputs.len(), 8);
        let mut state = x.clone();
        for u in &w.inputs {
            let next = m.step(&state, &DVector::from_vec(vec![*u]));
            assert!(h.value(next.as_slice()) >= 0.8 * h.value(state.as_slice()) - 1e-12);
            state = next;
        }
    }

    #[test]
    fn relaxed_result_is_gamma_independent() {
        let (m, _, v) = fields();
        let h = barrier_sphere();
        for x in [[1.0, 0.5, -0.5], [-1.2, 0.3, 0.9], [0.0, 1.5, 0.0]] {
            let x = DVector::from_vec(x.to_vec());
            let a = ControllerConfig::new(Formulation::ClfCbfNmpc).with_gamma(0.05);
            let b = ControllerConfig::new(Formulation::ClfCbfNmpc).with_gamma(0.2);
            assert_eq!(
                brute_force_feasible(&a, &m, &h, &v, &x, 5).unwrap(),
                brute_force_feasible(&b, &m, &h, &v, &x, 5).unwrap()
            );
        }
    }

    #[test]
    fn budget_and_dimension_errors() {
        let (m, h, v) = fields();
        let x = DVector::from_vec(vec![0.0, 2.0, 2.0]);
        let c = ControllerConfig::new(Formulation::ClfCbfNmpc);
        assert!(matches!(
            brute_force_search(&c, &m, &h, &v, &x, 5, 3),
            Err(Error::Oracle(_))
        ));
        assert!(brute_force_feasible(&c, &m, &h, &v, &x, 1).is_err());
    }

    #[test]
    fn audit_of_small_grid_is_sound() {
        use crate::feasibility::{sample_grid, GridAxis};
        use crate::nlp::SolverSettings;
        let (m, h, v) = fields();
        let axes = [
            GridAxis::new(-2.0, 0.0, 3).unwrap(),
            GridAxis::new(0.0, 2.0, 3).unwrap(),
            GridAxis::new(0.0, 2.0, 3).unwrap(),
        ];
        let c = ControllerConfig::new(Formulation::MpcGcbf).with_gamma(0.1);
        let grid = sample_grid(&c, &m, &h, &v, &axes, &SolverSettings::default(), Some(1)).unwrap();
        let audit = audit_grid(&grid, &c, &m, &h, &v, &OracleSettings::default()).unwrap();
        assert_eq!(audit.checked, 27);
        assert!(audit.unsound.is_empty(), "{audit:?}");
        assert!(audit.oracle_feasible <= grid.feasible_count());
    }
}
