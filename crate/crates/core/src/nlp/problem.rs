use std::fmt;
use std::sync::Arc;

use crate::Error;

type ValueFn = dyn Fn(&[f64]) -> f64 + Send + Sync;
type GradFn = dyn Fn(&[f64], &mut [f64]) + Send + Sync;

#[derive(Clone)]
enum Repr {
    Affine { terms: Vec<(usize, f64)>, constant: f64 },
    General { value: Arc<ValueFn>, gradient: Arc<GradFn> },
}

/// A scalar function of the decision vector with an analytic gradient.
#[derive(Clone)]
pub struct SmoothFn {
    repr: Repr,
}

impl fmt::Debug for SmoothFn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.repr {
            Repr::Affine { terms, constant } => f
                .debug_struct("Affine")
                .field("terms", terms)
                .field("constant", constant)
                .finish(),
            Repr::General { .. } => f.write_str("General"),
        }
    }
}

impl SmoothFn {
    /// `constant + sum(coef * z[index])`.
    pub fn affine(terms: Vec<(usize, f64)>, constant: f64) -> Self {
        Self {
            repr: Repr::Affine { terms, constant },
        }
    }

    pub fn constant(value: f64) -> Self {
        Self::affine(Vec::new(), value)
    }

    /// `gradient(z, out)` receives a zeroed `out` and writes the nonzeros.
    pub fn new<V, G>(value: V, gradient: G) -> Self
    where
        V: Fn(&[f64]) -> f64 + Send + Sync + 'static,
        G: Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
    {
        Self {
            repr: Repr::General {
                value: Arc::new(value),
                gradient: Arc::new(gradient),
            },
        }
    }

    pub fn is_affine(&self) -> bool {
        matches!(self.repr, Repr::Affine { .. })
    }

    pub fn value(&self, z: &[f64]) -> f64 {
        match &self.repr {
            Repr::Affine { terms, constant } => {
                terms.iter().fold(*constant, |acc, &(i, c)| acc + c * z[i])
            }
            Repr::General { value, .. } => value(z),
        }
    }

    /// Overwrites `out` with the gradient at `z`.
    pub fn gradient_into(&self, z: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        match &self.repr {
            Repr::Affine { terms, .. } => {
                for &(i, c) in terms {
                    out[i] += c;
                }
            }
            Repr::General { gradient, .. } => gradient(z, out),
        }
    }

    pub fn gradient(&self, z: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; z.len()];
        self.gradient_into(z, &mut out);
        out
    }
}

/// A named scalar constraint; equalities mean `f(z) = 0`, inequalities
/// `f(z) >= 0`.
#[derive(Debug, Clone)]
pub struct Constraint {
    pub name: String,
    pub function: SmoothFn,
}

/// `f(z) = sum(r_i(z)^2) + sum(t_j(z))`.
///
/// Declaring the squared residuals separately lets the solver start from the
/// Gauss-Newton Hessian `2 J'J`.
#[derive(Debug, Clone, Default)]
pub struct Objective {
    pub squares: Vec<SmoothFn>,
    pub terms: Vec<SmoothFn>,
}

impl Objective {
    pub fn value(&self, z: &[f64]) -> f64 {
        let sq: f64 = self
            .squares
            .iter()
            .map(|r| {
                let v = r.value(z);
                v * v
            })
            .sum();
        sq + self.terms.iter().map(|t| t.value(z)).sum::<f64>()
    }

    /// Returns `f(z)` and writes the gradient into `out`.
    pub fn gradient_into(&self, z: &[f64], out: &mut [f64], scratch: &mut [f64]) -> f64 {
        out.iter_mut().for_each(|v| *v = 0.0);
        let mut total = 0.0;
        for r in &self.squares {
            let v = r.value(z);
            total += v * v;
            r.gradient_into(z, scratch);
            for (o, g) in out.iter_mut().zip(scratch.iter()) {
                *o += 2.0 * v * g;
            }
        }
        for t in &self.terms {
            total += t.value(z);
            t.gradient_into(z, scratch);
            for (o, g) in out.iter_mut().zip(scratch.iter()) {
                *o += g;
            }
        }
        total
    }
}

/// Dense nonlinear program
///
/// ```text
/// min f(z)  s.t.  e_j(z) = 0,  g_i(z) >= 0,  lower <= z <= upper
/// ```
#[derive(Debug, Clone)]
pub struct NlpProblem {
    pub num_vars: usize,
    pub objective: Objective,
    pub eq_constraints: Vec<Constraint>,
    pub ineq_constraints: Vec<Constraint>,
    pub var_lower: Vec<f64>,
    pub var_upper: Vec<f64>,
    pub initial_guess: Vec<f64>,
}

impl NlpProblem {
    /// Unbounded problem with a zero objective and zero initial guess.
    pub fn new(num_vars: usize) -> Self {
        Self {
            num_vars,
            objective: Objective::default(),
            eq_constraints: Vec::new(),
            ineq_constraints: Vec::new(),
            var_lower: vec![f64::NEG_INFINITY; num_vars],
            var_upper: vec![f64::INFINITY; num_vars],
            initial_guess: vec![0.0; num_vars],
        }
    }

    pub fn add_square(&mut self, residual: SmoothFn) {
        self.objective.squares.push(residual);
    }

    pub fn add_term(&mut self, term: SmoothFn) {
        self.objective.terms.push(term);
    }

    pub fn add_eq(&mut self, name: impl Into<String>, function: SmoothFn) {
        self.eq_constraints.push(Constraint {
            name: name.into(),
            function,
        });
    }

    pub fn add_ineq(&mut self, name: impl Into<String>, function: SmoothFn) {
        self.ineq_constraints.push(Constraint {
            name: name.into(),
            function,
        });
    }

    pub fn set_bounds(&mut self, index: usize, lower: f64, upper: f64) {
        self.var_lower[index] = lower;
        self.var_upper[index] = upper;
    }

    pub fn validate(&self) -> Result<(), Error> {
        let n = self.num_vars;
        if self.var_lower.len() != n || self.var_upper.len() != n || self.initial_guess.len() != n
        {
            return Err(Error::InvalidArgument(
                "bounds and initial guess must have num_vars entries".into(),
            ));
        }
        for i in 0..n {
            let (lo, hi) = (self.var_lower[i], self.var_upper[i]);
            if lo.is_nan() || hi.is_nan() || lo > hi {
                return Err(Error::InvalidArgument(format!(
                    "variable {i} has inconsistent bounds [{lo}, {hi}]"
                )));
            }
        }
        Ok(())
    }

    /// Total l1 violation `sum|e_j| + sum max(0, -g_i)` plus bound violation.
    pub fn violation(&self, z: &[f64]) -> f64 {
        let eq: f64 = self
            .eq_constraints
            .iter()
            .map(|c| c.function.value(z).abs())
            .sum();
        let ineq: f64 = self
            .ineq_constraints
            .iter()
            .map(|c| (-c.function.value(z)).max(0.0))
            .sum();
        eq + ineq + self.bound_violation(z)
    }

    /// Largest single constraint violation (infinity norm).
    pub fn max_violation(&self, z: &[f64]) -> f64 {
        let mut worst = self.bound_violation_max(z);
        for c in &self.eq_constraints {
            worst = worst.max(c.function.value(z).abs());
        }
        for c in &self.ineq_constraints {
            worst = worst.max(-c.function.value(z));
        }
        worst
    }

    fn bound_violation(&self, z: &[f64]) -> f64 {
        z.iter()
            .zip(self.var_lower.iter().zip(self.var_upper.iter()))
            .map(|(v, (lo, hi))| (lo - v).max(0.0) + (v - hi).max(0.0))
            .sum()
    }

    fn bound_violation_max(&self, z: &[f64]) -> f64 {
        z.iter()
            .zip(self.var_lower.iter().zip(self.var_upper.iter()))
            .map(|(v, (lo, hi))| (lo - v).max(v - hi).max(0.0))
            .fold(0.0, f64::max)
    }

    pub fn clamp_to_bounds(&self, z: &mut [f64]) {
        for (i, v) in z.iter_mut().enumerate() {
            *v = v.max(self.var_lower[i]).min(self.var_upper[i]);
        }
    }
}

/// Worst analytic-vs-numeric gradient mismatch over all callbacks.
#[derive(Debug, Clone, PartialEq)]
pub struct DerivativeReport {
    pub max_rel_error: f64,
    /// Callback with the worst error: `"objective"` or a constraint name.
    pub worst_function: Option<String>,
    pub worst_variable: Option<usize>,
}

fn fd_gradient(f: &dyn Fn(&[f64]) -> f64, z: &[f64]) -> Vec<f64> {
    let mut probe = z.to_vec();
    let mut g = vec![0.0; z.len()];
    for i in 0..z.len() {
        // Power-of-two step so the probe points and their spacing are exact.
        let h = (1e-6 * z[i].abs().max(1.0)).log2().floor().exp2();
        let up = z[i] + h;
        let down = z[i] - h;
        probe[i] = up;
        let fp = f(&probe);
        probe[i] = down;
        let fm = f(&probe);
        probe[i] = z[i];
        g[i] = (fp - fm) / (up - down);
    }
    g
}

/// Compares every callback gradient against central differences at `point`.
///
/// The error of an entry is `|analytic - numeric| / max(1, |numeric|)`.
pub fn check_derivatives(problem: &NlpProblem, point: &[f64]) -> DerivativeReport {
    let mut report = DerivativeReport {
        max_rel_error: 0.0,
        worst_function: None,
        worst_variable: None,
    };
    let mut consider = |name: &str, analytic: &[f64], numeric: &[f64]| {
        for (i, (a, f)) in analytic.iter().zip(numeric).enumerate() {
            let err = (a - f).abs() / f.abs().max(1.0);
            if err > report.max_rel_error || report.worst_function.is_none() {
                report.max_rel_error = err;
                report.worst_function = Some(name.to_string());
                report.worst_variable = Some(i);
            }
        }
    };

    let n = problem.num_vars;
    let mut grad = vec![0.0; n];
    let mut scratch = vec![0.0; n];
    problem
        .objective
        .gradient_into(point, &mut grad, &mut scratch);
    let numeric = fd_gradient(&|z| problem.objective.value(z), point);
    consider("objective", &grad, &numeric);

    for c in problem.eq_constraints.iter().chain(&problem.ineq_constraints) {
        c.function.gradient_into(point, &mut grad);
        let numeric = fd_gradient(&|z| c.function.value(z), point);
        consider(&c.name, &grad, &numeric);
    }
    report
}
