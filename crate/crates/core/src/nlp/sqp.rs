//! Sequential quadratic programming with an l1 exact-penalty merit function.
//!
//! Each iteration linearizes the constraints about the current iterate and
//! solves a convex QP. Constraints violated at the iterate receive a one-sided
//! elastic variable, so `d = 0` is always feasible for the subproblem. When
//! the merit line search stalls on an infeasible iterate the solver switches
//! to a restoration phase that minimizes the total l1 violation; a start is
//! declared locally infeasible only when restoration converges above
//! `feas_tol`.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::qp::{dot, DenseQp, QpStatus};
use super::{NlpProblem, SolveResult, SolveStatus, SolverSettings};
use crate::clock::Stopwatch;

const ELASTIC_CURVATURE: f64 = 1e-9;
const MAX_PENALTY: f64 = 1e12;
const MAX_RESTORATIONS: usize = 5;

struct Evaluation {
    f: f64,
    grad: Vec<f64>,
    eq: Vec<f64>,
    eq_jac: Vec<f64>,
    ineq: Vec<f64>,
    ineq_jac: Vec<f64>,
}

impl Evaluation {
    fn violation(&self) -> f64 {
        self.eq.iter().map(|e| e.abs()).sum::<f64>()
            + self.ineq.iter().map(|g| (-g).max(0.0)).sum::<f64>()
    }

    fn max_violation(&self) -> f64 {
        let eq = self.eq.iter().fold(0.0f64, |m, e| m.max(e.abs()));
        self.ineq.iter().fold(eq, |m, g| m.max(-g))
    }

    fn linearized_violation(&self, n: usize, d: &[f64]) -> f64 {
        let eq: f64 = self
            .eq
            .iter()
            .enumerate()
            .map(|(j, e)| (e + dot(&self.eq_jac[j * n..(j + 1) * n], d)).abs())
            .sum();
        let ineq: f64 = self
            .ineq
            .iter()
            .enumerate()
            .map(|(i, g)| (-(g + dot(&self.ineq_jac[i * n..(i + 1) * n], d))).max(0.0))
            .sum();
        eq + ineq
    }

    /// `grad f - Je' y - Jg' lambda`
    fn lagrangian_gradient(&self, n: usize, y: &[f64], lambda: &[f64]) -> Vec<f64> {
        let mut out = self.grad.clone();
        for (j, yj) in y.iter().enumerate() {
            if *yj != 0.0 {
                for (o, a) in out.iter_mut().zip(&self.eq_jac[j * n..(j + 1) * n]) {
                    *o -= yj * a;
                }
            }
        }
        for (i, li) in lambda.iter().enumerate() {
            if *li != 0.0 {
                for (o, a) in out.iter_mut().zip(&self.ineq_jac[i * n..(i + 1) * n]) {
                    *o -= li * a;
                }
            }
        }
        out
    }
}

fn evaluate(problem: &NlpProblem, z: &[f64], with_objective: bool) -> Option<Evaluation> {
    let n = problem.num_vars;
    let mut grad = vec![0.0; n];
    let mut scratch = vec![0.0; n];
    let f = if with_objective {
        problem.objective.gradient_into(z, &mut grad, &mut scratch)
    } else {
        0.0
    };
    let me = problem.eq_constraints.len();
    let mi = problem.ineq_constraints.len();
    let mut eq = Vec::with_capacity(me);
    let mut eq_jac = vec![0.0; me * n];
    for (j, c) in problem.eq_constraints.iter().enumerate() {
        eq.push(c.function.value(z));
        c.function.gradient_into(z, &mut eq_jac[j * n..(j + 1) * n]);
    }
    let mut ineq = Vec::with_capacity(mi);
    let mut ineq_jac = vec![0.0; mi * n];
    for (i, c) in problem.ineq_constraints.iter().enumerate() {
        ineq.push(c.function.value(z));
        c.function.gradient_into(z, &mut ineq_jac[i * n..(i + 1) * n]);
    }
    let finite = f.is_finite()
        && grad.iter().all(|v| v.is_finite())
        && eq.iter().chain(&ineq).all(|v| v.is_finite())
        && eq_jac.iter().chain(&ineq_jac).all(|v| v.is_finite());
    finite.then_some(Evaluation {
        f,
        grad,
        eq,
        eq_jac,
        ineq,
        ineq_jac,
    })
}

struct Subproblem {
    qp: DenseQp,
    x0: Vec<f64>,
    active: Vec<usize>,
    elastic_start: usize,
}

/// Linearized subproblem in `(d, elastic...)`. `grad` is the objective
/// gradient (`None` for the pure restoration model).
fn build_subproblem(
    problem: &NlpProblem,
    ev: &Evaluation,
    z: &[f64],
    hessian: &DMatrix<f64>,
    grad: Option<&[f64]>,
    penalty: f64,
    eq_threshold: f64,
) -> Subproblem {
    let n = problem.num_vars;
    let violated_eq: Vec<usize> = (0..ev.eq.len())
        .filter(|&j| ev.eq[j].abs() > eq_threshold)
        .collect();
    let violated_in: Vec<usize> = (0..ev.ineq.len()).filter(|&i| ev.ineq[i] < 0.0).collect();
    let ne = violated_eq.len() + violated_in.len();
    let dim = n + ne;

    let mut qp = DenseQp::new(dim);
    qp.hessian.view_mut((0, 0), (n, n)).copy_from(hessian);
    for k in n..dim {
        qp.hessian[(k, k)] = ELASTIC_CURVATURE;
        qp.linear[k] = penalty;
        qp.lower[k] = 0.0;
    }
    if let Some(g) = grad {
        qp.linear[..n].copy_from_slice(g);
    }
    for i in 0..n {
        qp.lower[i] = problem.var_lower[i] - z[i];
        qp.upper[i] = problem.var_upper[i] - z[i];
    }

    let mut x0 = vec![0.0; dim];
    let mut elastic_of_eq = vec![None; ev.eq.len()];
    let mut elastic_of_in = vec![None; ev.ineq.len()];
    let mut col = n;
    for &j in &violated_eq {
        elastic_of_eq[j] = Some(col);
        x0[col] = ev.eq[j].abs();
        col += 1;
    }
    for &i in &violated_in {
        elastic_of_in[i] = Some(col);
        x0[col] = -ev.ineq[i];
        col += 1;
    }

    let mut row = vec![0.0; dim];
    for j in 0..ev.eq.len() {
        row.iter_mut().for_each(|v| *v = 0.0);
        row[..n].copy_from_slice(&ev.eq_jac[j * n..(j + 1) * n]);
        if let Some(c) = elastic_of_eq[j] {
            // e + J d - q = 0 for e > 0, e + J d + p = 0 for e < 0
            row[c] = if ev.eq[j] > 0.0 { -1.0 } else { 1.0 };
        }
        qp.push_eq(&row, -ev.eq[j]);
    }
    let mut active = Vec::new();
    for i in 0..ev.ineq.len() {
        row.iter_mut().for_each(|v| *v = 0.0);
        row[..n].copy_from_slice(&ev.ineq_jac[i * n..(i + 1) * n]);
        if let Some(c) = elastic_of_in[i] {
            row[c] = 1.0;
            active.push(i);
        }
        qp.push_in(&row, -ev.ineq[i]);
    }
    Subproblem {
        qp,
        x0,
        active,
        elastic_start: n,
    }
}

fn qp_iteration_cap(qp: &DenseQp) -> usize {
    10 * (qp.n + qp.num_in() + qp.num_eq()) + 50
}

/// Gauss-Newton Hessian `2 J'J` of the declared squared residuals.
fn gauss_newton(problem: &NlpProblem, z: &[f64]) -> DMatrix<f64> {
    let n = problem.num_vars;
    let mut b = DMatrix::<f64>::zeros(n, n);
    let mut g = vec![0.0; n];
    for r in &problem.objective.squares {
        r.gradient_into(z, &mut g);
        let nz: Vec<usize> = (0..n).filter(|&i| g[i] != 0.0).collect();
        for &i in &nz {
            for &j in &nz {
                b[(i, j)] += 2.0 * g[i] * g[j];
            }
        }
    }
    let diag_max = (0..n).fold(0.0f64, |m, i| m.max(b[(i, i)]));
    if diag_max == 0.0 {
        return DMatrix::identity(n, n);
    }
    let reg = 1e-10 * (1.0 + diag_max);
    for i in 0..n {
        b[(i, i)] += reg;
    }
    b
}

/// Powell-damped BFGS update; falls back to `reset` when the result is not
/// positive definite.
fn damped_bfgs(b: &mut DMatrix<f64>, s: &[f64], y: &[f64], reset: &DMatrix<f64>) {
    let sv = DVector::from_column_slice(s);
    let yv = DVector::from_column_slice(y);
    let bs = &*b * &sv;
    let sbs = sv.dot(&bs);
    if !(sbs > 1e-300) {
        return;
    }
    let sy = sv.dot(&yv);
    let theta = if sy >= 0.2 * sbs {
        1.0
    } else {
        0.8 * sbs / (sbs - sy)
    };
    let r = &yv * theta + &bs * (1.0 - theta);
    let sr = sv.dot(&r);
    if !(sr > 1e-300) {
        return;
    }
    *b += &r * r.transpose() / sr - &bs * bs.transpose() / sbs;
    if b.iter().any(|v| !v.is_finite()) || b.clone().cholesky().is_none() {
        b.copy_from(reset);
    }
}

/// Largest stationarity or complementarity residual, relative to
/// `1 + |grad f|_inf`.
fn kkt_residual(problem: &NlpProblem, ev: &Evaluation, z: &[f64], y: &[f64], lambda: &[f64]) -> f64 {
    let n = problem.num_vars;
    let r = ev.lagrangian_gradient(n, y, lambda);
    let mut worst = 0.0f64;
    for i in 0..n {
        let (lo, hi) = (problem.var_lower[i], problem.var_upper[i]);
        let at_lower = lo.is_finite() && z[i] - lo <= 1e-9 * (1.0 + lo.abs());
        let at_upper = hi.is_finite() && hi - z[i] <= 1e-9 * (1.0 + hi.abs());
        let ri = match (at_lower, at_upper) {
            (true, true) => 0.0,
            (true, false) => r[i].min(0.0),
            (false, true) => r[i].max(0.0),
            (false, false) => r[i],
        };
        worst = worst.max(ri.abs());
    }
    for (l, g) in lambda.iter().zip(&ev.ineq) {
        worst = worst.max((-l).max(0.0));
        worst = worst.max((l * g).abs());
    }
    worst / (1.0 + ev.grad.iter().fold(0.0f64, |m, v| m.max(v.abs())))
}

struct Restoration {
    min_violation: f64,
    witness: Vec<f64>,
    iterations: usize,
    numerical_failure: bool,
}

/// Minimizes the l1 violation from one start with a proximal
/// sequential-linear scheme.
fn restore(
    problem: &NlpProblem,
    settings: &SolverSettings,
    start: &[f64],
    trace: &mut Option<&mut Vec<String>>,
) -> Restoration {
    let n = problem.num_vars;
    let mut z = start.to_vec();
    problem.clamp_to_bounds(&mut z);
    let target = 0.1 * settings.feas_tol;
    let mut prox = 1e-4;
    let mut iterations = 0;

    let mut ev = match evaluate(problem, &z, false) {
        Some(e) => e,
        None => {
            return Restoration {
                min_violation: f64::INFINITY,
                witness: z,
                iterations,
                numerical_failure: true,
            }
        }
    };
    let mut viol = ev.violation();
    while iterations < settings.max_iterations && viol > target {
        iterations += 1;
        let hessian = DMatrix::identity(n, n) * prox;
        let sub = build_subproblem(problem, &ev, &z, &hessian, None, 1.0, 0.0);
        let cap = qp_iteration_cap(&sub.qp);
        let sol = sub.qp.solve(sub.x0.clone(), &sub.active, cap);
        if sol.status == QpStatus::Singular {
            break;
        }
        let d = &sol.x[..n];
        let pred = viol - ev.linearized_violation(n, d);
        if let Some(t) = trace.as_mut() {
            t.push(format!("restore {iterations} {viol:.6e} {viol:.6e} pred={pred:.3e}"));
        }
        if pred <= 1e-12 * (1.0 + viol) {
            // Stationary for the linearized violation.
            break;
        }
        let mut alpha = 1.0;
        let mut accepted = None;
        while alpha > 1e-10 {
            let mut trial: Vec<f64> = z.iter().zip(d).map(|(a, b)| a + alpha * b).collect();
            problem.clamp_to_bounds(&mut trial);
            if let Some(tev) = evaluate(problem, &trial, false) {
                let tv = tev.violation();
                if tv <= viol - 1e-4 * alpha * pred {
                    accepted = Some((trial, tev, tv));
                    break;
                }
            }
            alpha *= 0.5;
        }
        match accepted {
            Some((trial, tev, tv)) => {
                z = trial;
                ev = tev;
                viol = tv;
                prox = if alpha == 1.0 {
                    (prox * 0.1).max(1e-8)
                } else {
                    (prox * 10.0).min(1e4)
                };
            }
            None => {
                if prox >= 1e4 {
                    break;
                }
                prox = (prox * 100.0).min(1e4);
            }
        }
    }
    Restoration {
        min_violation: viol,
        witness: z,
        iterations,
        numerical_failure: false,
    }
}

struct Iterate {
    z: Vec<f64>,
    f: f64,
    max_violation: f64,
    kkt: f64,
    y: Vec<f64>,
    lambda: Vec<f64>,
}

enum StartOutcome {
    Optimal(Iterate),
    LocallyInfeasible { min_violation: f64, witness: Vec<f64> },
    Failed { status: SolveStatus, point: Option<Iterate> },
}

fn sqp_from(
    problem: &NlpProblem,
    settings: &SolverSettings,
    start: &[f64],
    iterations: &mut usize,
    trace: &mut Option<&mut Vec<String>>,
) -> StartOutcome {
    let n = problem.num_vars;
    let me = problem.eq_constraints.len();
    let mi = problem.ineq_constraints.len();
    let mut z = start.to_vec();
    problem.clamp_to_bounds(&mut z);

    let b0 = gauss_newton(problem, &z);
    let mut b = b0.clone();
    let mut penalty = 10.0f64;
    let mut restorations = 0;
    let mut rounding_steps = 0;
    let eq_threshold = 1e-3 * settings.feas_tol;

    let mut ev = match evaluate(problem, &z, true) {
        Some(e) => e,
        None => {
            return StartOutcome::Failed {
                status: SolveStatus::NumericalFailure,
                point: None,
            }
        }
    };
    let mut last = None;

    for _ in 0..settings.max_iterations {
        *iterations += 1;
        let viol = ev.violation();
        let max_viol = ev.max_violation();

        let mut sol;
        let mut sub;
        loop {
            sub = build_subproblem(problem, &ev, &z, &b, Some(&ev.grad), penalty, eq_threshold);
            let cap = qp_iteration_cap(&sub.qp);
            sol = sub.qp.solve(sub.x0.clone(), &sub.active, cap);
            let elastic: f64 = sol.x[sub.elastic_start..].iter().sum();
            let lin_viol = ev.linearized_violation(n, &sol.x[..n]);
            let mult_max = sol
                .lambda_eq
                .iter()
                .chain(&sol.lambda_in)
                .fold(0.0f64, |m, v| m.max(v.abs()));
            // Keep the penalty above the multipliers so the merit is exact,
            // and grow it while the step leaves removable linearized
            // violation behind.
            let needed = 2.0 * mult_max;
            if penalty < needed && penalty < MAX_PENALTY {
                penalty = needed.min(MAX_PENALTY);
                continue;
            }
            if elastic > 1e-12 * (1.0 + viol) && lin_viol > 1e-3 * viol && penalty < MAX_PENALTY {
                penalty = (penalty * settings.penalty_growth).min(MAX_PENALTY);
                continue;
            }
            break;
        }
        let d = sol.x[..n].to_vec();
        let y: Vec<f64> = sol.lambda_eq.clone();
        let lambda: Vec<f64> = sol.lambda_in.clone();
        debug_assert_eq!(y.len(), me);
        debug_assert_eq!(lambda.len(), mi);

        let kkt = kkt_residual(problem, &ev, &z, &y, &lambda);
        let current = Iterate {
            z: z.clone(),
            f: ev.f,
            max_violation: max_viol,
            kkt,
            y: y.clone(),
            lambda: lambda.clone(),
        };
        if max_viol <= settings.feas_tol && kkt <= settings.opt_tol {
            return StartOutcome::Optimal(current);
        }
        last = Some(current);

        let dv = DVector::from_column_slice(&d);
        let quad = 0.5 * dv.dot(&(&b * &dv));
        let lin_viol = ev.linearized_violation(n, &d);
        let pred = -(dot(&ev.grad, &d) + quad) + penalty * (viol - lin_viol);
        let merit = ev.f + penalty * viol;
        if let Some(t) = trace.as_mut() {
            t.push(format!(
                "{} {merit:.9e} {viol:.6e} {:.6e} kkt={kkt:.3e} qp_iters={}",
                *iterations,
                d.iter().fold(0.0f64, |m, v| m.max(v.abs())),
                sol.iterations
            ));
        }

        let mut accepted = None;
        if pred > 1e-16 * (1.0 + merit.abs()) {
            let mut alpha = 1.0;
            while alpha > 1e-10 {
                let mut trial: Vec<f64> = z.iter().zip(&d).map(|(a, b)| a + alpha * b).collect();
                problem.clamp_to_bounds(&mut trial);
                if let Some(tev) = evaluate(problem, &trial, true) {
                    let tm = tev.f + penalty * tev.violation();
                    if tm <= merit - 1e-4 * alpha * pred {
                        accepted = Some((trial, tev));
                        break;
                    }
                }
                alpha *= 0.5;
            }
        }
        if accepted.is_none()
            && max_viol <= settings.feas_tol
            && pred <= 1e-9 * (1.0 + merit.abs())
            && rounding_steps < 3
        {
            // The model decrease is at rounding level, so the merit test is
            // meaningless; take the full step if it stays feasible.
            let mut trial: Vec<f64> = z.iter().zip(&d).map(|(a, b)| a + b).collect();
            problem.clamp_to_bounds(&mut trial);
            if let Some(tev) = evaluate(problem, &trial, true) {
                if tev.max_violation() <= settings.feas_tol {
                    rounding_steps += 1;
                    accepted = Some((trial, tev));
                }
            }
        }

        match accepted {
            Some((trial, tev)) => {
                let s: Vec<f64> = trial.iter().zip(&z).map(|(a, b)| a - b).collect();
                let g_new = tev.lagrangian_gradient(n, &y, &lambda);
                let g_old = ev.lagrangian_gradient(n, &y, &lambda);
                let yk: Vec<f64> = g_new.iter().zip(&g_old).map(|(a, b)| a - b).collect();
                damped_bfgs(&mut b, &s, &yk, &b0);
                z = trial;
                ev = tev;
            }
            None => {
                if max_viol <= settings.feas_tol {
                    // Feasible but unable to make merit progress.
                    return StartOutcome::Failed {
                        status: SolveStatus::NumericalFailure,
                        point: last,
                    };
                }
                if restorations >= MAX_RESTORATIONS {
                    break;
                }
                restorations += 1;
                let rest = restore(problem, settings, &z, trace);
                *iterations += rest.iterations;
                if rest.numerical_failure {
                    return StartOutcome::Failed {
                        status: SolveStatus::NumericalFailure,
                        point: last,
                    };
                }
                if rest.min_violation > settings.feas_tol {
                    return StartOutcome::LocallyInfeasible {
                        min_violation: rest.min_violation,
                        witness: rest.witness,
                    };
                }
                z = rest.witness;
                ev = match evaluate(problem, &z, true) {
                    Some(e) => e,
                    None => {
                        return StartOutcome::Failed {
                            status: SolveStatus::NumericalFailure,
                            point: last,
                        }
                    }
                };
                penalty = (penalty * settings.penalty_growth).min(MAX_PENALTY);
                b.copy_from(&b0);
            }
        }
    }
    StartOutcome::Failed {
        status: SolveStatus::IterationLimit,
        point: last,
    }
}

fn starting_points(problem: &NlpProblem, settings: &SolverSettings) -> Vec<Vec<f64>> {
    let n = problem.num_vars;
    let mut starts = vec![problem.initial_guess.clone()];
    if settings.multistart_count >= 2 {
        starts.push(vec![0.0; n]);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    while starts.len() < settings.multistart_count {
        let point = (0..n)
            .map(|i| {
                let (lo, hi) = (problem.var_lower[i], problem.var_upper[i]);
                let g = problem.initial_guess[i];
                let s = g.abs().max(1.0);
                let lo = if lo.is_finite() { lo } else { g - s };
                let hi = if hi.is_finite() { hi } else { g + s };
                if hi > lo {
                    rng.random_range(lo..=hi)
                } else {
                    lo
                }
            })
            .collect();
        starts.push(point);
    }
    starts
}

/// Solves the NLP with multistart SQP.
///
/// `Infeasible` is reported only when restoration from every start converges
/// to an l1 violation above `feas_tol`.
pub fn solve(problem: &NlpProblem, settings: &SolverSettings) -> SolveResult {
    let clock = Stopwatch::start();
    let mut trace_buf = Vec::new();
    let mut result = SolveResult {
        status: SolveStatus::NumericalFailure,
        z_opt: problem.initial_guess.clone(),
        objective_value: f64::NAN,
        max_constraint_violation: f64::NAN,
        kkt_residual: f64::NAN,
        iterations: 0,
        wall_time: 0.0,
        multipliers_eq: vec![0.0; problem.eq_constraints.len()],
        multipliers_ineq: vec![0.0; problem.ineq_constraints.len()],
        infeasibility_certificate: None,
        starts_used: 0,
        trace: Vec::new(),
    };
    if problem.validate().is_err() || settings.validate().is_err() {
        result.wall_time = clock.seconds();
        return result;
    }

    let mut iterations = 0;
    let mut certificate = f64::INFINITY;
    let mut best_witness: Option<Vec<f64>> = None;
    let mut all_infeasible = true;
    let mut saw_iteration_limit = false;
    let mut fallback: Option<Iterate> = None;

    for (k, start) in starting_points(problem, settings).iter().enumerate() {
        result.starts_used = k + 1;
        let mut trace = settings.verbose.then_some(&mut trace_buf);
        if let Some(t) = trace.as_mut() {
            t.push(format!("start {k}"));
        }
        match sqp_from(problem, settings, start, &mut iterations, &mut trace) {
            StartOutcome::Optimal(it) => {
                fill(&mut result, it);
                result.status = SolveStatus::Optimal;
                result.iterations = iterations;
                result.trace = trace_buf;
                result.wall_time = clock.seconds();
                return result;
            }
            StartOutcome::LocallyInfeasible {
                min_violation,
                witness,
            } => {
                if min_violation < certificate {
                    certificate = min_violation;
                    best_witness = Some(witness);
                }
            }
            StartOutcome::Failed { status, point } => {
                all_infeasible = false;
                saw_iteration_limit |= status == SolveStatus::IterationLimit;
                if let Some(p) = point {
                    let better = fallback
                        .as_ref()
                        .is_none_or(|f| p.max_violation < f.max_violation);
                    if better {
                        fallback = Some(p);
                    }
                }
            }
        }
    }

    if all_infeasible {
        result.status = SolveStatus::Infeasible;
        result.infeasibility_certificate = Some(certificate);
        if let Some(w) = best_witness {
            result.objective_value = problem.objective.value(&w);
            result.max_constraint_violation = problem.max_violation(&w);
            result.z_opt = w;
        }
    } else {
        result.status = if saw_iteration_limit {
            SolveStatus::IterationLimit
        } else {
            SolveStatus::NumericalFailure
        };
        if let Some(p) = fallback {
            fill(&mut result, p);
        }
    }
    result.iterations = iterations;
    result.trace = trace_buf;
    result.wall_time = clock.seconds();
    result
}

fn fill(result: &mut SolveResult, it: Iterate) {
    result.z_opt = it.z;
    result.objective_value = it.f;
    result.max_constraint_violation = it.max_violation;
    result.kkt_residual = it.kkt;
    result.multipliers_eq = it.y;
    result.multipliers_ineq = it.lambda;
}

/// Result of [`feasibility_phase`].
#[derive(Debug, Clone, PartialEq)]
pub struct FeasibilityOutcome {
    /// Smallest l1 violation reached over all starts.
    pub min_violation: f64,
    pub witness: Vec<f64>,
    /// `min_violation <= feas_tol`.
    pub feasible: bool,
    pub iterations: usize,
    pub starts_used: usize,
    /// Some start hit non-finite callback values.
    pub numerical_failure: bool,
}

/// Minimizes `sum max(0, -g_i) + sum |e_j|` over the bounds from each start
/// until one reaches `feas_tol`.
pub fn feasibility_phase(problem: &NlpProblem, settings: &SolverSettings) -> FeasibilityOutcome {
    let mut out = FeasibilityOutcome {
        min_violation: f64::INFINITY,
        witness: problem.initial_guess.clone(),
        feasible: false,
        iterations: 0,
        starts_used: 0,
        numerical_failure: false,
    };
    if problem.validate().is_err() {
        out.numerical_failure = true;
        return out;
    }
    for (k, start) in starting_points(problem, settings).iter().enumerate() {
        out.starts_used = k + 1;
        let rest = restore(problem, settings, start, &mut None);
        out.iterations += rest.iterations;
        out.numerical_failure |= rest.numerical_failure;
        if rest.min_violation < out.min_violation {
            out.min_violation = rest.min_violation;
            out.witness = rest.witness;
        }
        if out.min_violation <= settings.feas_tol {
            out.feasible = true;
            break;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nlp::SmoothFn;

    fn settings() -> SolverSettings {
        SolverSettings::default()
    }

    #[test]
    fn active_lower_constraint() {
        // min u^2 s.t. u >= 1, u in [-5, 5]
        let mut p = NlpProblem::new(1);
        p.set_bounds(0, -5.0, 5.0);
        p.add_square(SmoothFn::affine(vec![(0, 1.0)], 0.0));
        p.add_ineq("u>=1", SmoothFn::affine(vec![(0, 1.0)], -1.0));
        let r = solve(&p, &settings());
        assert_eq!(r.status, SolveStatus::Optimal);
        assert!((r.z_opt[0] - 1.0).abs() < 1e-8, "{r:?}");
        assert!((r.objective_value - 1.0).abs() < 1e-8);
        assert!(r.kkt_residual <= 1e-6);
        assert!((r.multipliers_ineq[0] - 2.0).abs() < 1e-6);
    }

    #[test]
    fn contradictory_constraints_are_infeasible() {
        let mut p = NlpProblem::new(1);
        p.add_square(SmoothFn::affine(vec![(0, 1.0)], 0.0));
        p.add_ineq("u>=1", SmoothFn::affine(vec![(0, 1.0)], -1.0));
        p.add_ineq("u<=0", SmoothFn::affine(vec![(0, -1.0)], 0.0));
        let r = solve(&p, &settings());
        assert_eq!(r.status, SolveStatus::Infeasible);
        let cert = r.infeasibility_certificate.unwrap();
        assert!((cert - 1.0).abs() < 1e-8, "{cert}");
        assert_eq!(r.starts_used, 3);
    }

    #[test]
    fn bilinear_relaxation_problem() {
        // min (w-1)^2 s.t. 2w <= 1, w >= 0
        let mut p = NlpProblem::new(1);
        p.set_bounds(0, 0.0, f64::INFINITY);
        p.add_square(SmoothFn::affine(vec![(0, 1.0)], -1.0));
        p.add_ineq("2w<=1", SmoothFn::affine(vec![(0, -2.0)], 1.0));
        let r = solve(&p, &settings());
        assert_eq!(r.status, SolveStatus::Optimal);
        assert!((r.z_opt[0] - 0.5).abs() < 1e-8);
    }

    #[test]
    fn nonlinear_equality_and_inequality() {
        // min (x-2)^2 + (y-1)^2 s.t. x^2 - y = 0, x + y <= 2
        let mut p = NlpProblem::new(2);
        p.add_square(SmoothFn::affine(vec![(0, 1.0)], -2.0));
        p.add_square(SmoothFn::affine(vec![(1, 1.0)], -1.0));
        p.add_eq(
            "parabola",
            SmoothFn::new(|z| z[0] * z[0] - z[1], |z, g| {
                g[0] = 2.0 * z[0];
                g[1] = -1.0;
            }),
        );
        p.add_ineq("sum", SmoothFn::affine(vec![(0, -1.0), (1, -1.0)], 2.0));
        let r = solve(&p, &settings());
        assert_eq!(r.status, SolveStatus::Optimal, "{r:?}");
        // Optimum is at x = 1, y = 1 (objective 1).
        assert!((r.z_opt[0] - 1.0).abs() < 1e-6, "{:?}", r.z_opt);
        assert!((r.z_opt[1] - 1.0).abs() < 1e-6);
        assert!(r.kkt_residual <= 1e-6);
    }

    #[test]
    fn restoration_on_contradiction_reaches_unit_violation() {
        let mut p = NlpProblem::new(1);
        p.add_ineq("u>=1", SmoothFn::affine(vec![(0, 1.0)], -1.0));
        p.add_ineq("u<=0", SmoothFn::affine(vec![(0, -1.0)], 0.0));
        let out = feasibility_phase(&p, &settings());
        assert!(!out.feasible);
        assert!((out.min_violation - 1.0).abs() < 1e-9);
        assert!(out.witness[0] >= -1e-9 && out.witness[0] <= 1.0 + 1e-9);
    }

    #[test]
    fn box_only_problem_is_feasible() {
        let mut p = NlpProblem::new(2);
        p.set_bounds(0, -1.0, 1.0);
        p.set_bounds(1, 2.0, 3.0);
        p.initial_guess = vec![0.0, 2.5];
        let out = feasibility_phase(&p, &settings());
        assert!(out.feasible);
        assert_eq!(out.min_violation, 0.0);
        assert_eq!(out.iterations, 0);
    }

    #[test]
    fn non_finite_callback_is_numerical_failure() {
        let mut p = NlpProblem::new(1);
        p.add_term(SmoothFn::new(|z| z[0].ln(), |z, g| g[0] = 1.0 / z[0]));
        p.set_bounds(0, -1.0, 1.0);
        p.initial_guess = vec![-0.5];
        let mut s = settings();
        s.multistart_count = 2;
        let r = solve(&p, &s);
        assert_eq!(r.status, SolveStatus::NumericalFailure);
    }

    #[test]
    fn determinism() {
        let mut p = NlpProblem::new(2);
        p.add_square(SmoothFn::affine(vec![(0, 1.0)], -3.0));
        p.add_square(SmoothFn::affine(vec![(1, 2.0)], 1.0));
        p.add_ineq(
            "disk",
            SmoothFn::new(|z| 1.0 - z[0] * z[0] - z[1] * z[1], |z, g| {
                g[0] = -2.0 * z[0];
                g[1] = -2.0 * z[1];
            }),
        );
        let a = solve(&p, &settings());
        let b = solve(&p, &settings());
        assert_eq!(a.status, SolveStatus::Optimal);
        assert_eq!(a.status, b.status);
        assert_eq!(a.z_opt, b.z_opt);
    }
}
