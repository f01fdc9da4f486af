//! Discrete-time dynamical systems and the scalar fields (barriers and
//! Lyapunov functions) evaluated along their trajectories.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::Error;

/// State vector `x`.
pub type StateVec = DVector<f64>;
/// Input vector `u`.
pub type InputVec = DVector<f64>;

type StepFn = dyn Fn(&[f64], &[f64], &mut [f64]) + Send + Sync;
type JacobianFn = dyn Fn(&[f64], &[f64]) -> (DMatrix<f64>, DMatrix<f64>) + Send + Sync;

#[derive(Clone)]
enum Dynamics {
    /// `x+ = A x + B u`
    Linear { a: DMatrix<f64>, b: DMatrix<f64> },
    Nonlinear {
        step: Arc<StepFn>,
        jacobians: Arc<JacobianFn>,
    },
}

/// A discrete-time system `x_{t+1} = f(x_t, u_t)` with box constraints on
/// the input and optional box constraints on the state.
#[derive(Clone)]
pub struct SystemModel {
    n: usize,
    m: usize,
    dt: f64,
    dynamics: Dynamics,
    input_lower: InputVec,
    input_upper: InputVec,
    state_lower: Option<StateVec>,
    state_upper: Option<StateVec>,
}

impl fmt::Debug for SystemModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SystemModel")
            .field("n", &self.n)
            .field("m", &self.m)
            .field("dt", &self.dt)
            .field("linear", &self.is_linear())
            .field("input_lower", &self.input_lower.as_slice())
            .field("input_upper", &self.input_upper.as_slice())
            .finish()
    }
}

fn check_bounds(lower: &DVector<f64>, upper: &DVector<f64>, what: &str) -> Result<(), Error> {
    if lower.len() != upper.len() {
        return Err(Error::InvalidArgument(format!(
            "{what} bounds have mismatched lengths"
        )));
    }
    for (i, (lo, hi)) in lower.iter().zip(upper.iter()).enumerate() {
        if lo.is_nan() || hi.is_nan() || lo > hi {
            return Err(Error::InvalidArgument(format!(
                "{what} bound {i} is empty: [{lo}, {hi}]"
            )));
        }
    }
    Ok(())
}

impl SystemModel {
    /// Linear time-invariant system `x+ = A x + B u`.
    pub fn linear(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        dt: f64,
        input_lower: InputVec,
        input_upper: InputVec,
    ) -> Result<Self, Error> {
        let n = a.nrows();
        if a.ncols() != n || b.nrows() != n {
            return Err(Error::InvalidArgument(format!(
                "A must be n x n and B n x m, got {}x{} and {}x{}",
                a.nrows(),
                a.ncols(),
                b.nrows(),
                b.ncols()
            )));
        }
        let m = b.ncols();
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::InvalidArgument(format!("dt must be positive, got {dt}")));
        }
        if input_lower.len() != m {
            return Err(Error::InvalidArgument("input bounds must have length m".into()));
        }
        check_bounds(&input_lower, &input_upper, "input")?;
        Ok(Self {
            n,
            m,
            dt,
            dynamics: Dynamics::Linear { a, b },
            input_lower,
            input_upper,
            state_lower: None,
            state_upper: None,
        })
    }

    /// General nonlinear system. `step(x, u, out)` writes `f(x, u)` into `out`;
    /// `jacobians(x, u)` returns `(df/dx, df/du)`.
    #[allow(clippy::too_many_arguments)]
    pub fn nonlinear<S, J>(
        n: usize,
        m: usize,
        dt: f64,
        step: S,
        jacobians: J,
        input_lower: InputVec,
        input_upper: InputVec,
    ) -> Result<Self, Error>
    where
        S: Fn(&[f64], &[f64], &mut [f64]) + Send + Sync + 'static,
        J: Fn(&[f64], &[f64]) -> (DMatrix<f64>, DMatrix<f64>) + Send + Sync + 'static,
    {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::InvalidArgument(format!("dt must be positive, got {dt}")));
        }
        if input_lower.len() != m {
            return Err(Error::InvalidArgument("input bounds must have length m".into()));
        }
        check_bounds(&input_lower, &input_upper, "input")?;
        Ok(Self {
            n,
            m,
            dt,
            dynamics: Dynamics::Nonlinear {
                step: Arc::new(step),
                jacobians: Arc::new(jacobians),
            },
            input_lower,
            input_upper,
            state_lower: None,
            state_upper: None,
        })
    }

    /// Adds a state box `lower <= x <= upper`.
    pub fn with_state_bounds(mut self, lower: StateVec, upper: StateVec) -> Result<Self, Error> {
        if lower.len() != self.n {
            return Err(Error::InvalidArgument("state bounds must have length n".into()));
        }
        check_bounds(&lower, &upper, "state")?;
        self.state_lower = Some(lower);
        self.state_upper = Some(upper);
        Ok(self)
    }

    pub fn state_dim(&self) -> usize {
        self.n
    }

    pub fn input_dim(&self) -> usize {
        self.m
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn input_lower(&self) -> &InputVec {
        &self.input_lower
    }

    pub fn input_upper(&self) -> &InputVec {
        &self.input_upper
    }

    pub fn state_lower(&self) -> Option<&StateVec> {
        self.state_lower.as_ref()
    }

    pub fn state_upper(&self) -> Option<&StateVec> {
        self.state_upper.as_ref()
    }

    pub fn is_linear(&self) -> bool {
        matches!(self.dynamics, Dynamics::Linear { .. })
    }

    /// `(A, B)` for linear systems.
    pub fn linear_matrices(&self) -> Option<(&DMatrix<f64>, &DMatrix<f64>)> {
        match &self.dynamics {
            Dynamics::Linear { a, b } => Some((a, b)),
            Dynamics::Nonlinear { .. } => None,
        }
    }

    /// Allocation-free step: writes `f(x, u)` into `out`.
    pub fn step_into(&self, x: &[f64], u: &[f64], out: &mut [f64]) {
        match &self.dynamics {
            Dynamics::Linear { a, b } => {
                for i in 0..self.n {
                    let mut acc = 0.0;
                    for j in 0..self.n {
                        acc += a[(i, j)] * x[j];
                    }
                    for j in 0..self.m {
                        acc += b[(i, j)] * u[j];
                    }
                    out[i] = acc;
                }
            }
            Dynamics::Nonlinear { step, .. } => step(x, u, out),
        }
    }

    pub fn step(&self, x: &StateVec, u: &InputVec) -> StateVec {
        let mut out = DVector::zeros(self.n);
        self.step_into(x.as_slice(), u.as_slice(), out.as_mut_slice());
        out
    }

    /// `(df/dx, df/du)` evaluated at `(x, u)`.
    pub fn jacobians(&self, x: &[f64], u: &[f64]) -> (DMatrix<f64>, DMatrix<f64>) {
        match &self.dynamics {
            Dynamics::Linear { a, b } => (a.clone(), b.clone()),
            Dynamics::Nonlinear { jacobians, .. } => jacobians(x, u),
        }
    }

    pub fn input_within_bounds(&self, u: &[f64]) -> bool {
        u.iter()
            .zip(self.input_lower.iter().zip(self.input_upper.iter()))
            .all(|(v, (lo, hi))| v >= lo && v <= hi)
    }

    pub fn state_within_bounds(&self, x: &[f64], tol: f64) -> bool {
        match (&self.state_lower, &self.state_upper) {
            (Some(lo), Some(hi)) => x
                .iter()
                .zip(lo.iter().zip(hi.iter()))
                .all(|(v, (l, h))| *v >= l - tol && *v <= h + tol),
            _ => true,
        }
    }
}

/// Triple integrator `x = [position, velocity, acceleration]`, `u = [jerk]`,
/// discretized with an exact zero-order hold.
pub fn triple_integrator(dt: f64, j_min: f64, j_max: f64) -> Result<SystemModel, Error> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::InvalidArgument(format!("dt must be positive, got {dt}")));
    }
    if !(j_min < j_max) {
        return Err(Error::InvalidArgument(format!(
            "jerk bounds must satisfy j_min < j_max, got [{j_min}, {j_max}]"
        )));
    }
    #[rustfmt::skip]
    let a = DMatrix::from_row_slice(3, 3, &[
        1.0, dt,  dt * dt / 2.0,
        0.0, 1.0, dt,
        0.0, 0.0, 1.0,
    ]);
    let b = DMatrix::from_column_slice(3, 1, &[dt * dt * dt / 6.0, dt * dt / 2.0, dt]);
    SystemModel::linear(
        a,
        b,
        dt,
        DVector::from_element(1, j_min),
        DVector::from_element(1, j_max),
    )
}

/// Whether a field encodes a safe set or a stabilization target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldKind {
    Barrier,
    Lyapunov,
}

type ValueFn = dyn Fn(&[f64]) -> f64 + Send + Sync;
type GradFn = dyn Fn(&[f64], &mut [f64]) + Send + Sync;

/// Finite-difference step used for user fields without an analytic gradient.
pub const FD_STEP: f64 = 1e-6;

/// A scalar function of the state with its gradient.
///
/// Barrier fields define the safe set `{x : h(x) >= 0}`.
#[derive(Clone)]
pub struct ScalarField {
    kind: FieldKind,
    dim: usize,
    value: Arc<ValueFn>,
    gradient: Option<Arc<GradFn>>,
    quadratic: Option<DMatrix<f64>>,
    label: String,
}

impl fmt::Debug for ScalarField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ScalarField")
            .field("kind", &self.kind)
            .field("label", &self.label)
            .field("dim", &self.dim)
            .finish()
    }
}

impl ScalarField {
    /// User-supplied field. Without `gradient` a central difference is used.
    pub fn new<V>(kind: FieldKind, dim: usize, label: impl Into<String>, value: V) -> Self
    where
        V: Fn(&[f64]) -> f64 + Send + Sync + 'static,
    {
        Self {
            kind,
            dim,
            value: Arc::new(value),
            gradient: None,
            quadratic: None,
            label: label.into(),
        }
    }

    pub fn with_gradient<G>(mut self, gradient: G) -> Self
    where
        G: Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
    {
        self.gradient = Some(Arc::new(gradient));
        self
    }

    pub fn kind(&self) -> FieldKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn has_analytic_gradient(&self) -> bool {
        self.gradient.is_some()
    }

    /// Weight matrix `P` when the field is exactly `x' P x`.
    pub fn quadratic_weights(&self) -> Option<&DMatrix<f64>> {
        self.quadratic.as_ref()
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        (self.value)(x)
    }

    /// Writes the gradient into `out` (length `dim`).
    pub fn gradient_into(&self, x: &[f64], out: &mut [f64]) {
        match &self.gradient {
            Some(g) => g(x, out),
            None => {
                let mut probe = x.to_vec();
                for i in 0..self.dim {
                    let h = FD_STEP * x[i].abs().max(1.0);
                    probe[i] = x[i] + h;
                    let fp = (self.value)(&probe);
                    probe[i] = x[i] - h;
                    let fm = (self.value)(&probe);
                    probe[i] = x[i];
                    out[i] = (fp - fm) / (2.0 * h);
                }
            }
        }
    }

    pub fn gradient(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        self.gradient_into(x, &mut out);
        out
    }

    /// `value(x) >= 0` for barrier fields.
    pub fn is_safe(&self, x: &[f64]) -> bool {
        self.value(x) >= 0.0
    }
}

/// `h(x) = -x[0]`: stay on the non-positive side of the first coordinate.
pub fn barrier_halfspace() -> ScalarField {
    ScalarField::new(FieldKind::Barrier, 3, "halfspace", |x| -x[0]).with_gradient(|_, g| {
        g[0] = -1.0;
        g[1] = 0.0;
        g[2] = 0.0;
    })
}

/// `h(x) = |x|^2 - 1`: stay outside the unit sphere.
pub fn barrier_sphere() -> ScalarField {
    ScalarField::new(FieldKind::Barrier, 3, "sphere", |x| {
        x[0] * x[0] + x[1] * x[1] + x[2] * x[2] - 1.0
    })
    .with_gradient(|x, g| {
        g[0] = 2.0 * x[0];
        g[1] = 2.0 * x[1];
        g[2] = 2.0 * x[2];
    })
}

/// `V(x) = x' P x` for a symmetric positive-definite `P`.
pub fn lyapunov_quadratic(p: DMatrix<f64>) -> Result<ScalarField, Error> {
    let n = p.nrows();
    if p.ncols() != n || n == 0 {
        return Err(Error::InvalidArgument("P must be a non-empty square matrix".into()));
    }
    let scale = p.amax().max(1.0);
    if (&p - p.transpose()).amax() > 1e-12 * scale {
        return Err(Error::InvalidArgument("P must be symmetric".into()));
    }
    if p.clone().cholesky().is_none() {
        return Err(Error::InvalidArgument("P must be positive definite".into()));
    }
    let pv = p.clone();
    let pg = p.clone();
    let mut field = ScalarField::new(FieldKind::Lyapunov, n, "quadratic", move |x| {
        let mut acc = 0.0;
        for i in 0..n {
            for j in 0..n {
                acc += x[i] * pv[(i, j)] * x[j];
            }
        }
        acc
    })
    .with_gradient(move |x, g| {
        for i in 0..n {
            let mut acc = 0.0;
            for j in 0..n {
                acc += pg[(i, j)] * x[j];
            }
            g[i] = 2.0 * acc;
        }
    });
    field.quadratic = Some(p);
    Ok(field)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn euler_oracle(x0: [f64; 3], jerk: f64, dt: f64, substeps: usize) -> [f64; 3] {
        // Integrate the continuous triple integrator with many explicit
        // Euler substeps.
        let h = dt / substeps as f64;
        let [mut p, mut v, mut a] = x0;
        for _ in 0..substeps {
            let (dp, dv, da) = (v, a, jerk);
            p += h * dp;
            v += h * dv;
            a += h * da;
        }
        [p, v, a]
    }

    #[test]
    fn zero_state_is_fixed_point() {
        let m = triple_integrator(0.1, -1.0, 1.0).unwrap();
        let x = m.step(&DVector::zeros(3), &DVector::zeros(1));
        assert_eq!(x.as_slice(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn pure_velocity_integration() {
        let m = triple_integrator(0.1, -1.0, 1.0).unwrap();
        let x = m.step(&DVector::from_vec(vec![0.0, 1.0, 0.0]), &DVector::zeros(1));
        assert_relative_eq!(x[0], 0.1, epsilon = 1e-15);
        assert_eq!(x[1], 1.0);
        assert_eq!(x[2], 0.0);
    }

    #[test]
    fn unit_jerk_matches_closed_form_and_euler() {
        let m = triple_integrator(0.1, -1.0, 1.0).unwrap();
        let x = m.step(&DVector::zeros(3), &DVector::from_element(1, 1.0));
        assert_relative_eq!(x[0], 1.0e-3 / 6.0, epsilon = 1e-16);
        assert_relative_eq!(x[1], 5.0e-3, epsilon = 1e-16);
        assert_relative_eq!(x[2], 0.1, epsilon = 1e-16);

        let e = euler_oracle([0.0, 0.0, 0.0], 1.0, 0.1, 10_000);
        assert_relative_eq!(x[0], e[0], max_relative = 1e-3);
        assert_relative_eq!(x[1], e[1], max_relative = 1e-3);
        assert_relative_eq!(x[2], e[2], max_relative = 1e-12);
    }

    #[test]
    fn zoh_matches_euler_from_general_state() {
        let m = triple_integrator(0.1, -1.0, 1.0).unwrap();
        let x0 = [-2.0, 0.3, 1.0];
        let x = m.step(&DVector::from_row_slice(&x0), &DVector::from_element(1, -0.7));
        let e = euler_oracle(x0, -0.7, 0.1, 10_000);
        for i in 0..3 {
            assert_relative_eq!(x[i], e[i], epsilon = 1e-5);
        }
    }

    #[test]
    fn invalid_triple_integrator_arguments() {
        assert!(matches!(triple_integrator(0.0, -1.0, 1.0), Err(Error::InvalidArgument(_))));
        assert!(matches!(triple_integrator(-0.1, -1.0, 1.0), Err(Error::InvalidArgument(_))));
        assert!(matches!(triple_integrator(0.1, 1.0, 1.0), Err(Error::InvalidArgument(_))));
        assert!(matches!(triple_integrator(0.1, 2.0, 1.0), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn halfspace_values() {
        let h = barrier_halfspace();
        assert_eq!(h.value(&[-2.0, 0.0, 1.0]), 2.0);
        assert_eq!(h.value(&[0.0, 3.0, -1.0]), 0.0);
        assert_eq!(h.gradient(&[5.0, 1.0, 2.0]), vec![-1.0, 0.0, 0.0]);
        assert_eq!(h.kind(), FieldKind::Barrier);
    }

    #[test]
    fn sphere_values() {
        let h = barrier_sphere();
        assert_eq!(h.value(&[1.0, 0.0, 0.0]), 0.0);
        assert_eq!(h.value(&[-2.0, 0.0, 1.0]), 4.0);
        assert_eq!(h.gradient(&[1.0, 1.0, 1.0]), vec![2.0, 2.0, 2.0]);
    }

    #[test]
    fn quadratic_lyapunov_values() {
        let v = lyapunov_quadratic(DMatrix::identity(3, 3)).unwrap();
        assert_eq!(v.value(&[0.0, 0.0, 0.0]), 0.0);
        assert_eq!(v.value(&[1.0, 2.0, 3.0]), 14.0);
        let v = lyapunov_quadratic(DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 1.0, 1.0])))
            .unwrap();
        assert_eq!(v.value(&[1.0, 0.0, 0.0]), 2.0);
        assert_eq!(v.gradient(&[1.0, 0.0, 0.0]), vec![4.0, 0.0, 0.0]);
        assert_eq!(v.kind(), FieldKind::Lyapunov);
    }

    #[test]
    fn lyapunov_rejects_indefinite_or_asymmetric() {
        let indefinite = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, -1.0, 1.0]));
        assert!(lyapunov_quadratic(indefinite).is_err());
        let mut asym = DMatrix::identity(3, 3);
        asym[(0, 1)] = 0.5;
        assert!(lyapunov_quadratic(asym).is_err());
        assert!(lyapunov_quadratic(DMatrix::zeros(3, 3)).is_err());
    }

    #[test]
    fn finite_difference_fallback() {
        let f = ScalarField::new(FieldKind::Barrier, 3, "custom", |x| x[0].sin() + x[1] * x[2]);
        let g = f.gradient(&[0.3, 2.0, -1.0]);
        assert_relative_eq!(g[0], 0.3f64.cos(), max_relative = 1e-8);
        assert_relative_eq!(g[1], -1.0, max_relative = 1e-8);
        assert_relative_eq!(g[2], 2.0, max_relative = 1e-8);
    }
}
