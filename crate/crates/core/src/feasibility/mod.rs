//! Grid sampling of feasible initial states, set comparison between grids,
//! and a brute-force enumeration oracle.

mod oracle;

pub use oracle::{
    audit_grid, brute_force_feasible, brute_force_search, OracleAudit, OracleSettings, OracleWitness,
};

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::io::{self, Write};

use serde::{Deserialize, Serialize};

use crate::clock::Stopwatch;
use crate::controllers::{transcribe, ControllerConfig, Formulation};
use crate::model::{ScalarField, StateVec, SystemModel};
use crate::nlp::{feasibility_phase, SolverSettings};
use crate::Error;

/// One sampled state dimension: `count` evenly spaced values in `[min, max]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridAxis {
    pub min: f64,
    pub max: f64,
    pub count: usize,
}

impl GridAxis {
    pub fn new(min: f64, max: f64, count: usize) -> Result<Self, Error> {
        let axis = Self { min, max, count };
        axis.validate()?;
        Ok(axis)
    }

    pub fn validate(&self) -> Result<(), Error> {
        if !(self.min.is_finite() && self.max.is_finite() && self.min < self.max) {
            return Err(Error::InvalidArgument(format!(
                "axis [{}, {}] is empty",
                self.min, self.max
            )));
        }
        if self.count < 2 {
            return Err(Error::InvalidArgument("axis resolution must be at least 2".into()));
        }
        Ok(())
    }

    pub fn value(&self, i: usize) -> f64 {
        if i + 1 == self.count {
            return self.max;
        }
        self.min + (self.max - self.min) * i as f64 / (self.count - 1) as f64
    }
}

/// Classification of one grid point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PointStatus {
    /// Restoration reached a violation within `feas_tol`.
    Feasible,
    /// Restoration converged above `feas_tol` from every start.
    Infeasible,
    /// The solver produced non-finite values; counted apart from certified
    /// infeasibility.
    SolverFailure,
    /// Outside the safe set, not classified.
    Excluded,
}

impl PointStatus {
    /// Code written to the `status` CSV column.
    pub fn code(self) -> u8 {
        match self {
            PointStatus::Feasible => 0,
            PointStatus::Infeasible => 1,
            PointStatus::SolverFailure => 3,
            PointStatus::Excluded => 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub state: Vec<f64>,
    pub status: PointStatus,
    /// Smallest l1 violation found by restoration.
    pub violation: f64,
    pub solve_ms: f64,
}

impl GridPoint {
    pub fn feasible(&self) -> bool {
        self.status == PointStatus::Feasible
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridMetadata {
    pub formulation: Formulation,
    /// Hash of the resolved controller configuration.
    pub config_digest: String,
    pub gamma: Vec<f64>,
    pub barrier: String,
    pub feas_tol: f64,
    pub settings: SolverSettings,
    pub total_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeasibilityGrid {
    pub axes: Vec<GridAxis>,
    /// Row-major over the axes: the last axis varies fastest.
    pub points: Vec<GridPoint>,
    pub metadata: GridMetadata,
}

pub const GRID_CSV_HEADER: &str = "x,v,a,feasible,status,violation,solve_ms";

impl FeasibilityGrid {
    pub fn feasible_count(&self) -> usize {
        self.points.iter().filter(|p| p.feasible()).count()
    }

    pub fn count(&self, status: PointStatus) -> usize {
        self.points.iter().filter(|p| p.status == status).count()
    }

    /// Writes `x,v,a,feasible,status,violation,solve_ms` rows. Grids of
    /// other dimensions use `s0,s1,...` as state column names.
    pub fn write_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        if self.axes.len() == 3 {
            writeln!(out, "{GRID_CSV_HEADER}")?;
        } else {
            let names: Vec<String> = (0..self.axes.len()).map(|i| format!("s{i}")).collect();
            writeln!(out, "{},feasible,status,violation,solve_ms", names.join(","))?;
        }
        for p in &self.points {
            for s in &p.state {
                write!(out, "{s},")?;
            }
            writeln!(
                out,
                "{},{},{:e},{:.3}",
                u8::from(p.feasible()),
                p.status.code(),
                p.violation,
                p.solve_ms
            )?;
        }
        Ok(())
    }
}

/// All grid states in row-major order.
pub fn grid_states(axes: &[GridAxis]) -> Vec<Vec<f64>> {
    let total: usize = axes.iter().map(|a| a.count).product();
    (0..total)
        .map(|mut idx| {
            let mut state = vec![0.0; axes.len()];
            for (d, axis) in axes.iter().enumerate().rev() {
                state[d] = axis.value(idx % axis.count);
                idx /= axis.count;
            }
            state
        })
        .collect()
}

fn config_digest(config: &ControllerConfig, model: &SystemModel, barrier: &str) -> Result<String, Error> {
    let resolved = config.resolve(model)?;
    let mut hasher = DefaultHasher::new();
    format!("{resolved:?}|{barrier}").hash(&mut hasher);
    Ok(format!("{:016x}", hasher.finish()))
}

/// Classifies one state with a feasibility-phase certificate.
pub fn classify_state(
    config: &ControllerConfig,
    model: &SystemModel,
    h: &ScalarField,
    v: &ScalarField,
    state: &[f64],
    settings: &SolverSettings,
) -> Result<GridPoint, Error> {
    let clock = Stopwatch::start();
    if config.formulation.has_barrier() && h.value(state) < 0.0 {
        return Ok(GridPoint {
            state: state.to_vec(),
            status: PointStatus::Excluded,
            violation: f64::NAN,
            solve_ms: 0.0,
        });
    }
    let x = StateVec::from_column_slice(state);
    let t = transcribe(config, model, h, v, &x)?;
    let outcome = feasibility_phase(&t.problem, settings);
    let status = if outcome.feasible {
        PointStatus::Feasible
    } else if outcome.numerical_failure {
        PointStatus::SolverFailure
    } else {
        PointStatus::Infeasible
    };
    Ok(GridPoint {
        state: state.to_vec(),
        status,
        violation: outcome.min_violation,
        solve_ms: clock.seconds() * 1e3,
    })
}

/// Classifies every state of the grid. States with `h(x) < 0` are excluded
/// for formulations with a barrier.
///
/// With the `parallel` feature the points are distributed over `jobs`
/// worker threads (all cores when `None`); results are always stored in
/// point-index order.
pub fn sample_grid(
    config: &ControllerConfig,
    model: &SystemModel,
    h: &ScalarField,
    v: &ScalarField,
    axes: &[GridAxis],
    settings: &SolverSettings,
    jobs: Option<usize>,
) -> Result<FeasibilityGrid, Error> {
    if axes.len() != model.state_dim() {
        return Err(Error::InvalidArgument(format!(
            "{} axes for a {}-dimensional state",
            axes.len(),
            model.state_dim()
        )));
    }
    for a in axes {
        a.validate()?;
    }
    settings.validate()?;
    let digest = config_digest(config, model, h.label())?;
    let resolved = config.resolve(model)?;
    let clock = Stopwatch::start();
    let states = grid_states(axes);
    let classify = |s: &Vec<f64>| classify_state(config, model, h, v, s, settings);
    let points = run_points(&states, classify, jobs)?;
    Ok(FeasibilityGrid {
        axes: axes.to_vec(),
        points,
        metadata: GridMetadata {
            formulation: config.formulation,
            config_digest: digest,
            gamma: resolved.gamma,
            barrier: h.label().to_string(),
            feas_tol: settings.feas_tol,
            settings: settings.clone(),
            total_seconds: clock.seconds(),
        },
    })
}

#[cfg(feature = "parallel")]
fn run_points<F>(states: &[Vec<f64>], f: F, jobs: Option<usize>) -> Result<Vec<GridPoint>, Error>
where
    F: Fn(&Vec<f64>) -> Result<GridPoint, Error> + Sync,
{
    use rayon::prelude::*;
    let work = || states.par_iter().map(&f).collect::<Result<Vec<_>, _>>();
    match jobs {
        Some(1) => states.iter().map(&f).collect(),
        Some(k) => rayon::ThreadPoolBuilder::new()
            .num_threads(k)
            .build()
            .map_err(|e| Error::InvalidArgument(format!("worker pool: {e}")))?
            .install(work),
        None => work(),
    }
}

#[cfg(not(feature = "parallel"))]
fn run_points<F>(states: &[Vec<f64>], f: F, _jobs: Option<usize>) -> Result<Vec<GridPoint>, Error>
where
    F: Fn(&Vec<f64>) -> Result<GridPoint, Error>,
{
    states.iter().map(f).collect()
}

/// Per-point set algebra between two grids over identical axes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridComparison {
    pub a_only: usize,
    pub b_only: usize,
    pub both: usize,
    pub neither: usize,
    /// Points excluded in either grid.
    pub excluded: usize,
    /// Indices feasible in A but not in B.
    pub subset_violations: Vec<usize>,
    /// Indices where either grid recorded a solver failure.
    pub failures: Vec<usize>,
}

impl GridComparison {
    pub fn total(&self) -> usize {
        self.a_only + self.b_only + self.both + self.neither + self.excluded
    }

    /// Points classified differently by the two grids.
    pub fn symmetric_difference(&self) -> usize {
        self.a_only + self.b_only
    }
}

/// Compares the classifications of `a` and `b` point by point.
pub fn compare(a: &FeasibilityGrid, b: &FeasibilityGrid) -> Result<GridComparison, Error> {
    if a.axes != b.axes || a.points.len() != b.points.len() {
        return Err(Error::AxisMismatch);
    }
    let mut c = GridComparison {
        a_only: 0,
        b_only: 0,
        both: 0,
        neither: 0,
        excluded: 0,
        subset_violations: Vec::new(),
        failures: Vec::new(),
    };
    for (i, (pa, pb)) in a.points.iter().zip(&b.points).enumerate() {
        if pa.status == PointStatus::SolverFailure || pb.status == PointStatus::SolverFailure {
            c.failures.push(i);
        }
        if pa.status == PointStatus::Excluded || pb.status == PointStatus::Excluded {
            c.excluded += 1;
            continue;
        }
        match (pa.feasible(), pb.feasible()) {
            (true, true) => c.both += 1,
            (true, false) => {
                c.a_only += 1;
                c.subset_violations.push(i);
            }
            (false, true) => c.b_only += 1,
            (false, false) => c.neither += 1,
        }
    }
    Ok(c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{barrier_halfspace, barrier_sphere, lyapunov_quadratic, triple_integrator};
    use nalgebra::DMatrix;

    fn small_axes() -> Vec<GridAxis> {
        vec![
            GridAxis::new(-2.0, 0.0, 3).unwrap(),
            GridAxis::new(0.0, 2.0, 3).unwrap(),
            GridAxis::new(0.0, 2.0, 2).unwrap(),
        ]
    }

    #[test]
    fn grid_states_are_row_major() {
        let s = grid_states(&small_axes());
        assert_eq!(s.len(), 18);
        assert_eq!(s[0], vec![-2.0, 0.0, 0.0]);
        assert_eq!(s[1], vec![-2.0, 0.0, 2.0]);
        assert_eq!(s[2], vec![-2.0, 1.0, 0.0]);
        assert_eq!(s[17], vec![0.0, 2.0, 2.0]);
    }

    #[test]
    fn axis_validation() {
        assert!(GridAxis::new(0.0, 0.0, 3).is_err());
        assert!(GridAxis::new(0.0, 1.0, 1).is_err());
        assert_eq!(GridAxis::new(-2.0, 0.0, 9).unwrap().value(8), 0.0);
    }

    #[test]
    fn sample_and_compare_small_grid() {
        let model = triple_integrator(0.1, -1.0, 1.0).unwrap();
        let h = barrier_halfspace();
        let v = lyapunov_quadratic(DMatrix::identity(3, 3)).unwrap();
        let s = SolverSettings::default();
        let a = ControllerConfig::new(Formulation::MpcCbf).with_gamma(0.2);
        let b = ControllerConfig::new(Formulation::CbfNmpc).with_gamma(0.2);
        let ga = sample_grid(&a, &model, &h, &v, &small_axes(), &s, Some(1)).unwrap();
        let gb = sample_grid(&b, &model, &h, &v, &small_axes(), &s, Some(1)).unwrap();
        // [-2, 0, 0] is an equilibrium deep inside the safe set.
        assert!(ga.points[0].feasible());
        // [0, 2, 2] moves out of the safe set immediately.
        assert_eq!(ga.points[17].status, PointStatus::Infeasible);
        let c = compare(&ga, &gb).unwrap();
        assert_eq!(c.total(), 18);
        assert!(c.subset_violations.is_empty(), "{c:?}");
        let same = compare(&ga, &ga).unwrap();
        assert_eq!(same.a_only + same.b_only, 0);

        let mut csv = Vec::new();
        ga.write_csv(&mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert!(text.starts_with(GRID_CSV_HEADER));
        assert_eq!(text.lines().count(), 19);
    }

    #[test]
    fn sphere_interior_is_excluded() {
        let model = triple_integrator(0.1, -1.0, 1.0).unwrap();
        let h = barrier_sphere();
        let v = lyapunov_quadratic(DMatrix::identity(3, 3)).unwrap();
        let axes = vec![GridAxis::new(-0.5, 0.5, 2).unwrap(); 3];
        let c = ControllerConfig::new(Formulation::DclfDcbf);
        let g = sample_grid(&c, &model, &h, &v, &axes, &SolverSettings::default(), Some(1)).unwrap();
        assert_eq!(g.count(PointStatus::Excluded), 8);
    }

    #[test]
    fn mismatched_axes_rejected() {
        let model = triple_integrator(0.1, -1.0, 1.0).unwrap();
        let h = barrier_halfspace();
        let v = lyapunov_quadratic(DMatrix::identity(3, 3)).unwrap();
        let s = SolverSettings::default();
        let c = ControllerConfig::new(Formulation::MpcCbf);
        let a = sample_grid(&c, &model, &h, &v, &small_axes(), &s, Some(1)).unwrap();
        let mut other = small_axes();
        other[2].count = 3;
        let b = sample_grid(&c, &model, &h, &v, &other, &s, Some(1)).unwrap();
        assert_eq!(compare(&a, &b), Err(Error::AxisMismatch));
    }
}
