use std::ops::Range;

use nalgebra::{DMatrix, DVector};

use super::config::{ControllerConfig, Formulation, Resolved};
use crate::model::{ScalarField, StateVec, SystemModel};
use crate::nlp::{NlpProblem, SmoothFn};
use crate::Error;

/// Where each block of decision variables lives in `z`.
///
/// Multiple-shooting layout: `[u_0..u_{N-1} | x_1..x_N | omega | s]`. The
/// initial state is a constant, not a variable. DCLF-DCBF eliminates its
/// single predicted state and has only `[u | s]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VarLayout {
    pub state_dim: usize,
    pub input_dim: usize,
    pub horizon: usize,
    pub inputs: Range<usize>,
    /// Empty when predicted states are eliminated.
    pub states: Range<usize>,
    pub omega: Range<usize>,
    pub slack: Range<usize>,
}

impl VarLayout {
    pub fn num_vars(&self) -> usize {
        self.slack.end
    }

    pub fn input(&self, k: usize) -> Range<usize> {
        let start = self.inputs.start + k * self.input_dim;
        start..start + self.input_dim
    }

    /// Predicted state `x_k` for `k >= 1`, when states are explicit.
    pub fn state(&self, k: usize) -> Option<Range<usize>> {
        if self.states.is_empty() || k == 0 || k > self.horizon {
            return None;
        }
        let start = self.states.start + (k - 1) * self.state_dim;
        Some(start..start + self.state_dim)
    }
}

/// An NLP for one receding-horizon step together with its variable layout.
#[derive(Debug, Clone)]
pub struct Transcription {
    pub problem: NlpProblem,
    pub layout: VarLayout,
    pub formulation: Formulation,
    pub x0: StateVec,
    /// The configuration with defaults filled in.
    pub resolved: Resolved,
    model: SystemModel,
}

impl Transcription {
    /// Predicted open-loop states `x_0..x_N` encoded by `z`.
    pub fn predicted_states(&self, z: &[f64]) -> Vec<StateVec> {
        let mut out = vec![self.x0.clone()];
        if self.layout.states.is_empty() {
            let mut x = self.x0.clone();
            for k in 0..self.layout.horizon {
                x = self.model.step(&x, &DVector::from_column_slice(&z[self.layout.input(k)]));
                out.push(x.clone());
            }
        } else {
            for k in 1..=self.layout.horizon {
                out.push(DVector::from_column_slice(&z[self.layout.state(k).unwrap()]));
            }
        }
        out
    }

    /// Warm start for the next step: every block shifted forward by one,
    /// with the last input repeated and the last state propagated through
    /// the model.
    pub fn shifted_guess(&self, z: &[f64]) -> Vec<f64> {
        let l = &self.layout;
        let mut out = z.to_vec();
        let shift = |out: &mut [f64], range: &Range<usize>, width: usize| {
            let block = &mut out[range.clone()];
            if block.len() > width {
                block.copy_within(width.., 0);
            }
        };
        shift(&mut out, &l.inputs, l.input_dim);
        if !l.states.is_empty() {
            shift(&mut out, &l.states, l.state_dim);
            let last = l.state(l.horizon).unwrap();
            let prev = z[last.clone()].to_vec();
            let u = &z[l.input(l.horizon - 1)];
            let mut next = vec![0.0; l.state_dim];
            self.model.step_into(&prev, u, &mut next);
            out[last].copy_from_slice(&next);
        }
        shift(&mut out, &l.omega, 1);
        shift(&mut out, &l.slack, 1);
        self.problem_clamped(out)
    }

    fn problem_clamped(&self, mut z: Vec<f64>) -> Vec<f64> {
        self.problem.clamp_to_bounds(&mut z);
        z
    }
}

/// `h(x_next) - w * coef * h(x_prev)` where `w` is `z[omega]` or 1 and
/// `x_prev` is a variable block or the constant initial state.
fn barrier_constraint(
    h: &ScalarField,
    next: usize,
    prev: Option<usize>,
    h0: f64,
    coef: f64,
    omega: Option<usize>,
) -> SmoothFn {
    let n = h.dim();
    let hv = h.clone();
    let hg = h.clone();
    SmoothFn::new(
        move |z| {
            let hp = prev.map_or(h0, |p| hv.value(&z[p..p + n]));
            let w = omega.map_or(1.0, |o| z[o]);
            hv.value(&z[next..next + n]) - w * coef * hp
        },
        move |z, g| {
            hg.gradient_into(&z[next..next + n], &mut g[next..next + n]);
            let w = omega.map_or(1.0, |o| z[o]);
            let hp = match prev {
                Some(p) => {
                    let mut buf = vec![0.0; n];
                    hg.gradient_into(&z[p..p + n], &mut buf);
                    for (gi, bi) in g[p..p + n].iter_mut().zip(&buf) {
                        *gi -= w * coef * bi;
                    }
                    hg.value(&z[p..p + n])
                }
                None => h0,
            };
            if let Some(o) = omega {
                g[o] = -coef * hp;
            }
        },
    )
}

/// `s + (1 - alpha) V(x_prev) - V(x_next) >= 0`.
fn lyapunov_constraint(v: &ScalarField, next: usize, prev: Option<usize>, v0: f64, keep: f64, slack: usize) -> SmoothFn {
    let n = v.dim();
    let vv = v.clone();
    let vg = v.clone();
    SmoothFn::new(
        move |z| {
            let vp = prev.map_or(v0, |p| vv.value(&z[p..p + n]));
            z[slack] + keep * vp - vv.value(&z[next..next + n])
        },
        move |z, g| {
            vg.gradient_into(&z[next..next + n], &mut g[next..next + n]);
            for gi in &mut g[next..next + n] {
                *gi = -*gi;
            }
            if let Some(p) = prev {
                let mut buf = vec![0.0; n];
                vg.gradient_into(&z[p..p + n], &mut buf);
                for (gi, bi) in g[p..p + n].iter_mut().zip(&buf) {
                    *gi += keep * bi;
                }
            }
            g[slack] = 1.0;
        },
    )
}

/// Adds `scale * (z[block] - center)' W (z[block] - center)` as affine
/// residuals from the eigendecomposition of `W`. With `block = None` the
/// value at `fixed` is added as a constant.
fn add_quadratic(
    problem: &mut NlpProblem,
    w: &DMatrix<f64>,
    scale: f64,
    block: Option<usize>,
    fixed: &[f64],
    center: &[f64],
) {
    if scale == 0.0 {
        return;
    }
    let dim = w.nrows();
    match block {
        None => {
            let d = DVector::from_iterator(dim, fixed.iter().zip(center).map(|(a, b)| a - b));
            let value = scale * d.dot(&(w * &d));
            if value != 0.0 {
                problem.add_term(SmoothFn::constant(value));
            }
        }
        Some(off) => {
            if (0..dim).all(|i| (0..dim).all(|j| i == j || w[(i, j)] == 0.0)) {
                for i in 0..dim {
                    let c = (scale * w[(i, i)]).sqrt();
                    if c > 0.0 {
                        problem.add_square(SmoothFn::affine(vec![(off + i, c)], -c * center[i]));
                    }
                }
                return;
            }
            let eig = w.clone().symmetric_eigen();
            let tol = 1e-14 * (1.0 + w.amax());
            for (k, lambda) in eig.eigenvalues.iter().enumerate() {
                if *lambda <= tol {
                    continue;
                }
                let c = (scale * lambda).sqrt();
                let vec = eig.eigenvectors.column(k);
                let terms: Vec<(usize, f64)> = (0..dim).map(|i| (off + i, c * vec[i])).collect();
                let constant = -(0..dim).map(|i| c * vec[i] * center[i]).sum::<f64>();
                problem.add_square(SmoothFn::affine(terms, constant));
            }
        }
    }
}

fn add_field_term(problem: &mut NlpProblem, v: &ScalarField, scale: f64, off: usize) {
    if scale == 0.0 {
        return;
    }
    if let Some(p) = v.quadratic_weights() {
        let zeros = vec![0.0; v.dim()];
        add_quadratic(problem, p, scale, Some(off), &zeros, &zeros);
        return;
    }
    let n = v.dim();
    let vv = v.clone();
    let vg = v.clone();
    problem.add_term(SmoothFn::new(
        move |z| scale * vv.value(&z[off..off + n]),
        move |z, g| {
            vg.gradient_into(&z[off..off + n], &mut g[off..off + n]);
            for gi in &mut g[off..off + n] {
                *gi *= scale;
            }
        },
    ));
}

fn check_inputs(model: &SystemModel, h: &ScalarField, v: &ScalarField, x_t: &StateVec) -> Result<(), Error> {
    let n = model.state_dim();
    if x_t.len() != n || x_t.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "initial state must be a finite vector of length {n}"
        )));
    }
    if h.dim() != n || v.dim() != n {
        return Err(Error::InvalidArgument(
            "barrier and Lyapunov fields must match the state dimension".into(),
        ));
    }
    Ok(())
}

/// Builds the NLP of the configured formulation at state `x_t`.
pub fn transcribe(
    config: &ControllerConfig,
    model: &SystemModel,
    h: &ScalarField,
    v: &ScalarField,
    x_t: &StateVec,
) -> Result<Transcription, Error> {
    let resolved = config.resolve(model)?;
    check_inputs(model, h, v, x_t)?;
    if resolved.formulation == Formulation::DclfDcbf {
        return Ok(transcribe_one_step(resolved, model, h, v, x_t));
    }
    Ok(transcribe_horizon(resolved, model, h, v, x_t))
}

fn transcribe_one_step(
    resolved: Resolved,
    model: &SystemModel,
    h: &ScalarField,
    v: &ScalarField,
    x_t: &StateVec,
) -> Transcription {
    let n = model.state_dim();
    let m = model.input_dim();
    let layout = VarLayout {
        state_dim: n,
        input_dim: m,
        horizon: 1,
        inputs: 0..m,
        states: m..m,
        omega: m..m,
        slack: m..m + 1,
    };
    let s = m;
    let mut problem = NlpProblem::new(m + 1);
    for i in 0..m {
        problem.set_bounds(i, model.input_lower()[i], model.input_upper()[i]);
    }
    problem.set_bounds(s, 0.0, f64::INFINITY);

    let zeros = vec![0.0; m];
    add_quadratic(&mut problem, &resolved.h_input, 1.0, Some(0), &zeros, &zeros);
    problem.add_square(SmoothFn::affine(vec![(s, resolved.p_slack.sqrt())], 0.0));

    let x0: Vec<f64> = x_t.iter().copied().collect();
    let coef = 1.0 - resolved.gamma[0];
    let h0 = h.value(&x0);
    let keep = 1.0 - resolved.alpha[0];
    let v0 = v.value(&x0);

    // The successor state is eliminated: x_1 = f(x_0, u).
    let one_step = |field: &ScalarField, lin: f64, slack: Option<usize>| {
        let (mv, mg) = (model.clone(), model.clone());
        let (fv, fg) = (field.clone(), field.clone());
        let (xv, xg) = (x0.clone(), x0.clone());
        SmoothFn::new(
            move |z| {
                let mut x1 = vec![0.0; xv.len()];
                mv.step_into(&xv, &z[..m], &mut x1);
                let base = fv.value(&x1) * lin;
                base + slack.map_or(0.0, |s| z[s])
            },
            move |z, g| {
                let mut x1 = vec![0.0; xg.len()];
                mg.step_into(&xg, &z[..m], &mut x1);
                let grad = fg.gradient(&x1);
                let (_, b) = mg.jacobians(&xg, &z[..m]);
                for j in 0..m {
                    g[j] = lin * (0..grad.len()).map(|i| grad[i] * b[(i, j)]).sum::<f64>();
                }
                if let Some(s) = slack {
                    g[s] = 1.0;
                }
            },
        )
    };
    let cbf = one_step(h, 1.0, None);
    let cbf_shifted = SmoothFn::new(
        {
            let c = cbf.clone();
            move |z| c.value(z) - coef * h0
        },
        {
            let c = cbf.clone();
            move |z, g| c.gradient_into(z, g)
        },
    );
    problem.add_ineq("cbf[0]", cbf_shifted);
    let clf = one_step(v, -1.0, Some(s));
    let clf_shifted = SmoothFn::new(
        {
            let c = clf.clone();
            move |z| c.value(z) + keep * v0
        },
        {
            let c = clf.clone();
            move |z, g| c.gradient_into(z, g)
        },
    );
    problem.add_ineq("clf[0]", clf_shifted);

    let mut guess = vec![0.0; m + 1];
    for i in 0..m {
        guess[i] = 0.0f64.clamp(model.input_lower()[i], model.input_upper()[i]);
    }
    let mut x1 = vec![0.0; n];
    model.step_into(&x0, &guess[..m], &mut x1);
    guess[s] = (v.value(&x1) - keep * v0).max(0.0);
    problem.initial_guess = guess;

    Transcription {
        problem,
        layout,
        formulation: resolved.formulation,
        x0: x_t.clone(),
        resolved,
        model: model.clone(),
    }
}

fn transcribe_horizon(
    resolved: Resolved,
    model: &SystemModel,
    h: &ScalarField,
    v: &ScalarField,
    x_t: &StateVec,
) -> Transcription {
    let f = resolved.formulation;
    let n = model.state_dim();
    let m = model.input_dim();
    let big_n = resolved.horizon;
    let num_omega = if f.is_relaxed() { resolved.m_cbf } else { 0 };
    let num_slack = resolved.m_clf;
    let inputs = 0..big_n * m;
    let states = inputs.end..inputs.end + big_n * n;
    let omega = states.end..states.end + num_omega;
    let slack = omega.end..omega.end + num_slack;
    let layout = VarLayout {
        state_dim: n,
        input_dim: m,
        horizon: big_n,
        inputs,
        states,
        omega,
        slack,
    };
    let mut problem = NlpProblem::new(layout.num_vars());
    let x0: Vec<f64> = x_t.iter().copied().collect();

    // Boxes.
    for k in 0..big_n {
        for (j, i) in layout.input(k).enumerate() {
            problem.set_bounds(i, model.input_lower()[j], model.input_upper()[j]);
        }
        if let (Some(lo), Some(hi)) = (model.state_lower(), model.state_upper()) {
            for (j, i) in layout.state(k + 1).unwrap().enumerate() {
                problem.set_bounds(i, lo[j], hi[j]);
            }
        }
    }
    let omega_bounds = resolved.omega_fixed.map_or((0.0, f64::INFINITY), |w| (w, w));
    for i in layout.omega.clone() {
        problem.set_bounds(i, omega_bounds.0, omega_bounds.1);
    }

    // Dynamics x_{k+1} = f(x_k, u_k).
    for k in 0..big_n {
        let next = layout.state(k + 1).unwrap().start;
        let prev = layout.state(k).map(|r| r.start);
        let u = layout.input(k).start;
        match model.linear_matrices() {
            Some((a, b)) => {
                for i in 0..n {
                    let mut terms = vec![(next + i, 1.0)];
                    let mut constant = 0.0;
                    for j in 0..n {
                        if a[(i, j)] != 0.0 {
                            match prev {
                                Some(p) => terms.push((p + j, -a[(i, j)])),
                                None => constant -= a[(i, j)] * x0[j],
                            }
                        }
                    }
                    for j in 0..m {
                        if b[(i, j)] != 0.0 {
                            terms.push((u + j, -b[(i, j)]));
                        }
                    }
                    problem.add_eq(format!("dynamics[{k}][{i}]"), SmoothFn::affine(terms, constant));
                }
            }
            None => {
                for i in 0..n {
                    let (mv, mg) = (model.clone(), model.clone());
                    let (xv, xg) = (x0.clone(), x0.clone());
                    problem.add_eq(
                        format!("dynamics[{k}][{i}]"),
                        SmoothFn::new(
                            move |z| {
                                let xp = prev.map_or(&xv[..], |p| &z[p..p + n]);
                                let mut out = vec![0.0; n];
                                mv.step_into(xp, &z[u..u + m], &mut out);
                                z[next + i] - out[i]
                            },
                            move |z, g| {
                                let xp = prev.map_or(&xg[..], |p| &z[p..p + n]);
                                let (a, b) = mg.jacobians(xp, &z[u..u + m]);
                                g[next + i] = 1.0;
                                if let Some(p) = prev {
                                    for j in 0..n {
                                        g[p + j] -= a[(i, j)];
                                    }
                                }
                                for j in 0..m {
                                    g[u + j] -= b[(i, j)];
                                }
                            },
                        ),
                    );
                }
            }
        }
    }

    // Barrier constraints.
    let h0 = h.value(&x0);
    let at = |k: usize| layout.state(k).map(|r| r.start);
    match f {
        Formulation::MpcCbf | Formulation::CbfNmpc | Formulation::ClfCbfNmpc => {
            let steps = if f == Formulation::MpcCbf { big_n } else { resolved.m_cbf };
            for k in 0..steps {
                let coef = 1.0 - resolved.gamma[k];
                let w = f.is_relaxed().then(|| layout.omega.start + k);
                let c = barrier_constraint(h, at(k + 1).unwrap(), at(k), h0, coef, w);
                problem.add_ineq(format!("cbf[{k}]"), c);
            }
        }
        Formulation::MpcGcbf => {
            let d = resolved.relative_degree;
            let coef = (1.0 - resolved.gamma[0]).powi(d as i32);
            let c = barrier_constraint(h, at(d).unwrap(), None, h0, coef, None);
            problem.add_ineq(format!("gcbf[{d}]"), c);
        }
        Formulation::ClfNmpc | Formulation::DclfDcbf => {}
    }

    // Lyapunov constraints.
    let v0 = v.value(&x0);
    for k in 0..num_slack {
        let keep = 1.0 - resolved.alpha[k];
        let c = lyapunov_constraint(v, at(k + 1).unwrap(), at(k), v0, keep, layout.slack.start + k);
        problem.add_ineq(format!("clf[{k}]"), c);
    }

    // Objective.
    let goal: Vec<f64> = resolved.goal.iter().copied().collect();
    let zeros_m = vec![0.0; m];
    for k in 0..big_n {
        add_quadratic(&mut problem, &resolved.q, 1.0, at(k), &x0, &goal);
        add_quadratic(&mut problem, &resolved.r, 1.0, Some(layout.input(k).start), &zeros_m, &zeros_m);
    }
    match f {
        Formulation::MpcCbf | Formulation::MpcGcbf => {
            add_quadratic(&mut problem, &resolved.p_terminal, 1.0, at(big_n), &x0, &goal);
        }
        Formulation::CbfNmpc => add_field_term(&mut problem, v, resolved.beta, at(big_n).unwrap()),
        _ => {}
    }
    let po = resolved.p_omega.sqrt();
    for i in layout.omega.clone() {
        problem.add_square(SmoothFn::affine(vec![(i, po)], -po));
    }
    let ps = resolved.p_slack.sqrt();
    for i in layout.slack.clone() {
        problem.add_square(SmoothFn::affine(vec![(i, ps)], 0.0));
    }

    // Initial guess: clamped zero input, its rollout, and the smallest
    // relaxation that makes the guess feasible.
    let mut guess = vec![0.0; layout.num_vars()];
    let mut states = vec![x0.clone()];
    for k in 0..big_n {
        let ur = layout.input(k);
        for (j, i) in ur.clone().enumerate() {
            guess[i] = 0.0f64.clamp(model.input_lower()[j], model.input_upper()[j]);
        }
        let mut next = vec![0.0; n];
        model.step_into(&states[k], &guess[ur], &mut next);
        guess[layout.state(k + 1).unwrap()].copy_from_slice(&next);
        states.push(next);
    }
    for k in 0..num_omega {
        let i = layout.omega.start + k;
        guess[i] = match resolved.omega_fixed {
            Some(w) => w,
            None => {
                let coef = 1.0 - resolved.gamma[k];
                let (hn, hp) = (h.value(&states[k + 1]), h.value(&states[k]));
                if coef * hp > 0.0 {
                    (hn / (coef * hp)).clamp(0.0, 1.0)
                } else {
                    1.0
                }
            }
        };
    }
    for k in 0..num_slack {
        let keep = 1.0 - resolved.alpha[k];
        guess[layout.slack.start + k] = (v.value(&states[k + 1]) - keep * v.value(&states[k])).max(0.0);
    }
    problem.initial_guess = guess;

    Transcription {
        problem,
        layout,
        formulation: f,
        x0: x_t.clone(),
        resolved,
        model: model.clone(),
    }
}
