//! WebAssembly bindings for the browser demo in `www/`.
//!
//! Every export takes plain numbers and strings and returns a JSON string,
//! so the page needs no bundler. The `*_json` functions are ordinary Rust
//! and are what the native tests exercise.

use std::str::FromStr;

use dcbf_mpc::feasibility::{classify_state, PointStatus};
use dcbf_mpc::simulator::RolloutOutcome;
use dcbf_mpc::{
    barrier_halfspace, barrier_sphere, lyapunov_quadratic, rollout, triple_integrator,
    ControllerConfig, Formulation, ScalarField, SolverSettings, StateVec, SystemModel,
};
use nalgebra::DMatrix;
use serde::Serialize;
use wasm_bindgen::prelude::*;

/// Demo box: x in [-2, 0], v in [0, 2]; the acceleration is fixed per slice.
const X_RANGE: (f64, f64) = (-2.0, 0.0);
const V_RANGE: (f64, f64) = (0.0, 2.0);
const MAX_RESOLUTION: usize = 41;
const MAX_STEPS: usize = 300;

struct Setup {
    model: SystemModel,
    config: ControllerConfig,
    h: ScalarField,
    v: ScalarField,
}

fn setup(formulation: &str, gamma: f64, barrier: &str) -> Result<Setup, String> {
    let f = Formulation::from_str(formulation).map_err(|e| e.to_string())?;
    let mut config = ControllerConfig::new(f);
    if f.has_barrier() {
        config = config.with_gamma(gamma);
    }
    let h = match barrier {
        "halfspace" => barrier_halfspace(),
        "sphere" => barrier_sphere(),
        other => return Err(format!("unknown barrier '{other}'")),
    };
    let model = triple_integrator(0.1, -1.0, 1.0).map_err(|e| e.to_string())?;
    // Same terminal CLF as the bundled closed-loop presets.
    let v = lyapunov_quadratic(DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![1.0, 10.0, 10.0])))
        .map_err(|e| e.to_string())?;
    config.validate(&model).map_err(|e| e.to_string())?;
    Ok(Setup { model, config, h, v })
}

fn axis(range: (f64, f64), n: usize, i: usize) -> f64 {
    range.0 + (range.1 - range.0) * i as f64 / (n - 1) as f64
}

#[derive(Serialize)]
struct Slice {
    n: usize,
    a: f64,
    x: Vec<f64>,
    v: Vec<f64>,
    /// Row-major over `(x, v)`: `feasible`, `infeasible`, `solver_failure`
    /// or `excluded`.
    status: Vec<PointStatus>,
    feasible: usize,
}

fn slice(setup: &Setup, a: f64, n: usize) -> Result<Slice, String> {
    if !(2..=MAX_RESOLUTION).contains(&n) {
        return Err(format!("resolution must lie in [2, {MAX_RESOLUTION}]"));
    }
    let settings = SolverSettings::default();
    let xs: Vec<f64> = (0..n).map(|i| axis(X_RANGE, n, i)).collect();
    let vs: Vec<f64> = (0..n).map(|i| axis(V_RANGE, n, i)).collect();
    let mut status = Vec::with_capacity(n * n);
    for &x in &xs {
        for &v in &vs {
            let p = classify_state(&setup.config, &setup.model, &setup.h, &setup.v, &[x, v, a], &settings)
                .map_err(|e| e.to_string())?;
            status.push(p.status);
        }
    }
    let feasible = status.iter().filter(|s| **s == PointStatus::Feasible).count();
    Ok(Slice {
        n,
        a,
        x: xs,
        v: vs,
        status,
        feasible,
    })
}

fn to_json<T: Serialize>(value: &T) -> Result<String, String> {
    serde_json::to_string(value).map_err(|e| e.to_string())
}

/// Feasibility of the `(x, v)` slice at acceleration `a` on an `n x n` grid.
pub fn feasibility_slice_json(formulation: &str, gamma: f64, barrier: &str, a: f64, n: usize) -> Result<String, String> {
    let s = setup(formulation, gamma, barrier)?;
    to_json(&slice(&s, a, n)?)
}

#[derive(Serialize)]
struct Overlay {
    n: usize,
    a: f64,
    x: Vec<f64>,
    v: Vec<f64>,
    /// 0 neither, 1 only the first, 2 only the second, 3 both; 4 excluded
    /// or unresolved in either.
    region: Vec<u8>,
    first: usize,
    second: usize,
    /// Points feasible for the first controller but not for the second.
    first_only: usize,
}

/// Overlays the slices of two controllers over the same grid.
#[allow(clippy::too_many_arguments)]
pub fn compare_slices_json(
    first: &str,
    first_gamma: f64,
    second: &str,
    second_gamma: f64,
    barrier: &str,
    a: f64,
    n: usize,
) -> Result<String, String> {
    let s1 = slice(&setup(first, first_gamma, barrier)?, a, n)?;
    let s2 = slice(&setup(second, second_gamma, barrier)?, a, n)?;
    let region: Vec<u8> = s1
        .status
        .iter()
        .zip(&s2.status)
        .map(|(p, q)| {
            let decided = |s: &PointStatus| matches!(s, PointStatus::Feasible | PointStatus::Infeasible);
            if !decided(p) || !decided(q) {
                return 4;
            }
            u8::from(*p == PointStatus::Feasible) + 2 * u8::from(*q == PointStatus::Feasible)
        })
        .collect();
    let first_only = region.iter().filter(|r| **r == 1).count();
    to_json(&Overlay {
        n,
        a,
        x: s1.x,
        v: s1.v,
        region,
        first: s1.feasible,
        second: s2.feasible,
        first_only,
    })
}

#[derive(Serialize)]
struct Rollout {
    time: Vec<f64>,
    h: Vec<f64>,
    x: Vec<f64>,
    u: Vec<f64>,
    completed: bool,
    /// Time of the first non-optimal solve.
    halted_at: Option<f64>,
    status: String,
}

/// Closed loop from `(x0, v0, a0)` for `steps` steps.
pub fn rollout_json(
    formulation: &str,
    gamma: f64,
    barrier: &str,
    x0: f64,
    v0: f64,
    a0: f64,
    steps: usize,
) -> Result<String, String> {
    if !(1..=MAX_STEPS).contains(&steps) {
        return Err(format!("steps must lie in [1, {MAX_STEPS}]"));
    }
    let s = setup(formulation, gamma, barrier)?;
    let x = StateVec::from_column_slice(&[x0, v0, a0]);
    let log = rollout(&s.config, &s.model, &s.h, &s.v, &x, steps, &SolverSettings::default())
        .map_err(|e| e.to_string())?;
    let (status, halted_at) = match log.outcome {
        RolloutOutcome::Completed => ("completed".to_string(), None),
        RolloutOutcome::Halted { step, status } => (status.as_str().to_string(), Some(log.records[step].time)),
    };
    let mut time: Vec<f64> = log.records.iter().map(|r| r.time).collect();
    let mut xs: Vec<f64> = log.records.iter().map(|r| r.state[0]).collect();
    if log.completed() {
        time.push(steps as f64 * s.model.dt());
        xs.push(log.final_state[0]);
    }
    to_json(&Rollout {
        time,
        h: log.barrier_values(),
        x: xs,
        u: log
            .records
            .iter()
            .filter_map(|r| r.input.as_ref().map(|u| u[0]))
            .collect(),
        completed: log.completed(),
        halted_at,
        status,
    })
}

#[wasm_bindgen]
pub fn feasibility_slice(formulation: &str, gamma: f64, barrier: &str, a: f64, n: usize) -> Result<String, JsError> {
    feasibility_slice_json(formulation, gamma, barrier, a, n).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn compare_slices(
    first: &str,
    first_gamma: f64,
    second: &str,
    second_gamma: f64,
    barrier: &str,
    a: f64,
    n: usize,
) -> Result<String, JsError> {
    compare_slices_json(first, first_gamma, second, second_gamma, barrier, a, n).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn closed_loop(
    formulation: &str,
    gamma: f64,
    barrier: &str,
    x0: f64,
    v0: f64,
    a0: f64,
    steps: usize,
) -> Result<String, JsError> {
    rollout_json(formulation, gamma, barrier, x0, v0, a0, steps).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn version() -> String {
    dcbf_mpc::VERSION.to_string()
}
