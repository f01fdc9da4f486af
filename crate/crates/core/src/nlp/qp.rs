//! Primal active-set solver for small dense convex QPs
//!
//! ```text
//! min 1/2 x'Hx + c'x  s.t.  A_eq x = b_eq,  A_in x >= b_in,  lower <= x <= upper
//! ```
//!
//! Variable bounds are handled by fixing variables, so every iteration solves
//! the KKT system over the free variables and the working constraint rows.

use nalgebra::{DMatrix, DVector};

/// Diagonal regularization of the constraint block of the KKT matrix.
const KKT_REGULARIZATION: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BoundState {
    Free,
    Lower,
    Upper,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum QpStatus {
    Optimal,
    IterationLimit,
    Singular,
}

#[derive(Debug, Clone)]
pub(crate) struct QpSolution {
    pub status: QpStatus,
    pub x: Vec<f64>,
    /// Multipliers of the equality rows, sign-free.
    pub lambda_eq: Vec<f64>,
    /// Multipliers of the inequality rows, nonnegative at optimality.
    pub lambda_in: Vec<f64>,
    pub iterations: usize,
}

/// Row-major dense QP data.
#[derive(Debug, Clone)]
pub(crate) struct DenseQp {
    pub n: usize,
    pub hessian: DMatrix<f64>,
    pub linear: Vec<f64>,
    pub a_eq: Vec<f64>,
    pub b_eq: Vec<f64>,
    pub a_in: Vec<f64>,
    pub b_in: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl DenseQp {
    pub fn new(n: usize) -> Self {
        Self {
            n,
            hessian: DMatrix::zeros(n, n),
            linear: vec![0.0; n],
            a_eq: Vec::new(),
            b_eq: Vec::new(),
            a_in: Vec::new(),
            b_in: Vec::new(),
            lower: vec![f64::NEG_INFINITY; n],
            upper: vec![f64::INFINITY; n],
        }
    }

    pub fn num_eq(&self) -> usize {
        self.b_eq.len()
    }

    pub fn num_in(&self) -> usize {
        self.b_in.len()
    }

    pub fn push_eq(&mut self, row: &[f64], rhs: f64) {
        debug_assert_eq!(row.len(), self.n);
        self.a_eq.extend_from_slice(row);
        self.b_eq.push(rhs);
    }

    pub fn push_in(&mut self, row: &[f64], rhs: f64) {
        debug_assert_eq!(row.len(), self.n);
        self.a_in.extend_from_slice(row);
        self.b_in.push(rhs);
    }

    fn eq_row(&self, j: usize) -> &[f64] {
        &self.a_eq[j * self.n..(j + 1) * self.n]
    }

    fn in_row(&self, i: usize) -> &[f64] {
        &self.a_in[i * self.n..(i + 1) * self.n]
    }

    #[cfg(test)]
    pub fn objective(&self, x: &[f64]) -> f64 {
        let xv = DVector::from_column_slice(x);
        0.5 * xv.dot(&(&self.hessian * &xv)) + dot(&self.linear, x)
    }

    /// Solves from a feasible start `x0`; `initial_active` lists inequality
    /// rows that are tight at `x0`.
    pub fn solve(&self, x0: Vec<f64>, initial_active: &[usize], max_iter: usize) -> QpSolution {
        let n = self.n;
        let me = self.num_eq();
        let mi = self.num_in();
        let mut x = x0;

        let mut bounds: Vec<BoundState> = (0..n)
            .map(|i| {
                if x[i] <= self.lower[i] {
                    x[i] = self.lower[i];
                    BoundState::Lower
                } else if x[i] >= self.upper[i] {
                    x[i] = self.upper[i];
                    BoundState::Upper
                } else {
                    BoundState::Free
                }
            })
            .collect();
        let mut working: Vec<usize> = Vec::new();
        let mut in_working = vec![false; mi];
        for &r in initial_active {
            if !in_working[r] {
                in_working[r] = true;
                working.push(r);
            }
        }
        let row_norms: Vec<f64> = (0..mi)
            .map(|i| self.in_row(i).iter().fold(0.0f64, |m, v| m.max(v.abs())))
            .collect();

        let mut lambda_eq = vec![0.0; me];
        let mut lambda_in = vec![0.0; mi];
        let mut status = QpStatus::IterationLimit;
        let mut iterations = 0;

        let mut grad = vec![0.0; n];
        let mut p = vec![0.0; n];
        let mut free: Vec<usize> = Vec::with_capacity(n);
        // Set after an unblocked full step, which lands on the minimizer of
        // the working set up to the rounding noise of the KKT solve.
        let mut full_step = false;

        while iterations < max_iter {
            iterations += 1;
            for i in 0..n {
                let mut acc = self.linear[i];
                for j in 0..n {
                    acc += self.hessian[(i, j)] * x[j];
                }
                grad[i] = acc;
            }
            free.clear();
            free.extend((0..n).filter(|&i| bounds[i] == BoundState::Free));
            let nf = free.len();
            let nr = me + working.len();
            let dim = nf + nr;

            let mut kkt = DMatrix::<f64>::zeros(dim, dim);
            let mut rhs = DVector::<f64>::zeros(dim);
            for (a, &i) in free.iter().enumerate() {
                for (b, &j) in free.iter().enumerate() {
                    kkt[(a, b)] = self.hessian[(i, j)];
                }
                rhs[a] = -grad[i];
            }
            for r in 0..nr {
                let (row, target) = if r < me {
                    (self.eq_row(r), self.b_eq[r])
                } else {
                    let w = working[r - me];
                    (self.in_row(w), self.b_in[w])
                };
                for (a, &i) in free.iter().enumerate() {
                    kkt[(nf + r, a)] = row[i];
                    kkt[(a, nf + r)] = row[i];
                }
                rhs[nf + r] = target - dot(row, &x);
            }

            let sol = match solve_kkt(kkt, &rhs, nf) {
                Some(s) => s,
                None => {
                    status = QpStatus::Singular;
                    break;
                }
            };
            p.iter_mut().for_each(|v| *v = 0.0);
            for (a, &i) in free.iter().enumerate() {
                p[i] = sol[a];
            }
            let pnorm = p.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let xnorm = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));

            let noise = if full_step { 1e-8 } else { 1e-12 };
            full_step = false;
            if pnorm <= noise * (1.0 + xnorm) {
                // Stationary on the working set: inspect multipliers.
                for j in 0..me {
                    lambda_eq[j] = -sol[nf + j];
                }
                lambda_in.iter_mut().for_each(|v| *v = 0.0);
                for (k, &w) in working.iter().enumerate() {
                    lambda_in[w] = -sol[nf + me + k];
                }
                let gnorm = grad.iter().fold(0.0f64, |m, v| m.max(v.abs()));
                let tol = 1e-10 * (1.0 + gnorm);

                let mut worst = -tol;
                let mut release: Option<Release> = None;
                for (k, &w) in working.iter().enumerate() {
                    if lambda_in[w] < worst {
                        worst = lambda_in[w];
                        release = Some(Release::Row(k));
                    }
                }
                for i in 0..n {
                    if bounds[i] == BoundState::Free || self.lower[i] == self.upper[i] {
                        continue;
                    }
                    let mut nu = grad[i];
                    for j in 0..me {
                        nu -= self.eq_row(j)[i] * lambda_eq[j];
                    }
                    for &w in &working {
                        nu -= self.in_row(w)[i] * lambda_in[w];
                    }
                    let signed = if bounds[i] == BoundState::Lower { nu } else { -nu };
                    if signed < worst {
                        worst = signed;
                        release = Some(Release::Bound(i));
                    }
                }
                match release {
                    None => {
                        status = QpStatus::Optimal;
                        break;
                    }
                    Some(Release::Row(k)) => {
                        let w = working.swap_remove(k);
                        in_working[w] = false;
                        lambda_in[w] = 0.0;
                    }
                    Some(Release::Bound(i)) => bounds[i] = BoundState::Free,
                }
                continue;
            }

            let mut alpha = 1.0;
            let mut block: Option<Block> = None;
            for &i in &free {
                if p[i] < 0.0 && self.lower[i].is_finite() {
                    let a = ((self.lower[i] - x[i]) / p[i]).max(0.0);
                    if a < alpha {
                        alpha = a;
                        block = Some(Block::Lower(i));
                    }
                } else if p[i] > 0.0 && self.upper[i].is_finite() {
                    let a = ((self.upper[i] - x[i]) / p[i]).max(0.0);
                    if a < alpha {
                        alpha = a;
                        block = Some(Block::Upper(i));
                    }
                }
            }
            for r in 0..mi {
                if in_working[r] {
                    continue;
                }
                let row = self.in_row(r);
                let ap = dot(row, &p);
                if ap < -1e-14 * row_norms[r] * pnorm {
                    let resid = (dot(row, &x) - self.b_in[r]).max(0.0);
                    let a = resid / -ap;
                    if a < alpha {
                        alpha = a;
                        block = Some(Block::Row(r));
                    }
                }
            }
            for i in 0..n {
                x[i] += alpha * p[i];
            }
            full_step = block.is_none();
            match block {
                Some(Block::Lower(i)) => {
                    x[i] = self.lower[i];
                    bounds[i] = BoundState::Lower;
                }
                Some(Block::Upper(i)) => {
                    x[i] = self.upper[i];
                    bounds[i] = BoundState::Upper;
                }
                Some(Block::Row(r)) => {
                    in_working[r] = true;
                    working.push(r);
                }
                None => {}
            }
        }

        QpSolution {
            status,
            x,
            lambda_eq,
            lambda_in,
            iterations,
        }
    }
}

enum Release {
    Row(usize),
    Bound(usize),
}

enum Block {
    Lower(usize),
    Upper(usize),
    Row(usize),
}

fn solve_kkt(kkt: DMatrix<f64>, rhs: &DVector<f64>, nf: usize) -> Option<DVector<f64>> {
    let dim = kkt.nrows();
    if dim == 0 {
        return Some(DVector::zeros(0));
    }
    let usable = |s: &DVector<f64>| {
        let scale = 1e12 * (1.0 + rhs.amax());
        s.iter().all(|v| v.is_finite() && v.abs() <= scale)
    };
    if let Some(sol) = kkt.clone().lu().solve(rhs).filter(usable) {
        return Some(sol);
    }
    // Degenerate active set: Tikhonov term on the constraint block.
    let mut reg = kkt.clone();
    for i in nf..dim {
        reg[(i, i)] = -KKT_REGULARIZATION;
    }
    if let Some(sol) = reg.lu().solve(rhs).filter(usable) {
        return Some(sol);
    }
    // Still singular: heavier diagonal shift.
    let mut shifted = kkt;
    let scale = shifted.amax().max(1.0);
    for i in 0..dim {
        let s = if i >= nf { -1e-7 } else { 1e-7 };
        shifted[(i, i)] += s * scale;
    }
    shifted.lu().solve(rhs).filter(|s| s.iter().all(|v| v.is_finite()))
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute_force_2d(qp: &DenseQp, lo: f64, hi: f64, step: f64) -> f64 {
        let mut best = f64::INFINITY;
        let count = ((hi - lo) / step).round() as usize;
        for a in 0..=count {
            for b in 0..=count {
                let x = [lo + a as f64 * step, lo + b as f64 * step];
                let feasible = (0..qp.num_in())
                    .all(|i| dot(qp.in_row(i), &x) >= qp.b_in[i] - 1e-12)
                    && (0..2).all(|i| x[i] >= qp.lower[i] && x[i] <= qp.upper[i]);
                if feasible {
                    best = best.min(qp.objective(&x));
                }
            }
        }
        best
    }

    #[test]
    fn unconstrained_minimum() {
        let mut qp = DenseQp::new(2);
        qp.hessian = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 4.0]);
        qp.linear = vec![-2.0, -4.0];
        let s = qp.solve(vec![0.0, 0.0], &[], 50);
        assert_eq!(s.status, QpStatus::Optimal);
        assert!((s.x[0] - 1.0).abs() < 1e-9 && (s.x[1] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn active_bound_and_row() {
        // min (x-2)^2 + (y-2)^2 s.t. x + y <= 2 (as -x - y >= -2), x <= 0.5
        let mut qp = DenseQp::new(2);
        qp.hessian = DMatrix::identity(2, 2) * 2.0;
        qp.linear = vec![-4.0, -4.0];
        qp.push_in(&[-1.0, -1.0], -2.0);
        qp.upper[0] = 0.5;
        let s = qp.solve(vec![0.0, 0.0], &[], 50);
        assert_eq!(s.status, QpStatus::Optimal);
        assert!((s.x[0] - 0.5).abs() < 1e-9, "{:?}", s.x);
        assert!((s.x[1] - 1.5).abs() < 1e-9, "{:?}", s.x);
        assert!(s.lambda_in[0] > 0.0);
        let grid = brute_force_2d(&qp, -1.0, 2.0, 1e-3);
        assert!((qp.objective(&s.x) - grid).abs() < 1e-3);
    }

    #[test]
    fn equality_constrained() {
        // min x^2 + y^2 s.t. x + y = 1
        let mut qp = DenseQp::new(2);
        qp.hessian = DMatrix::identity(2, 2) * 2.0;
        qp.push_eq(&[1.0, 1.0], 1.0);
        let s = qp.solve(vec![1.0, 0.0], &[], 50);
        assert_eq!(s.status, QpStatus::Optimal);
        assert!((s.x[0] - 0.5).abs() < 1e-8 && (s.x[1] - 0.5).abs() < 1e-8);
        assert!((s.lambda_eq[0] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn releases_constraint_with_negative_multiplier() {
        // Start on x >= 0 (tight) although optimum is interior at x = 1.
        let mut qp = DenseQp::new(1);
        qp.hessian = DMatrix::from_element(1, 1, 2.0);
        qp.linear = vec![-2.0];
        qp.push_in(&[1.0], 0.0);
        let s = qp.solve(vec![0.0], &[0], 50);
        assert_eq!(s.status, QpStatus::Optimal);
        assert!((s.x[0] - 1.0).abs() < 1e-9);
        assert_eq!(s.lambda_in[0], 0.0);
    }

    #[test]
    fn near_linear_program_with_elastic_variable() {
        // min 1e-9 t^2/2 + t s.t. x + t >= 1, x <= 0.25, t >= 0
        let mut qp = DenseQp::new(2);
        qp.hessian[(0, 0)] = 1e-4;
        qp.hessian[(1, 1)] = 1e-9;
        qp.linear = vec![0.0, 1.0];
        qp.push_in(&[1.0, 1.0], 1.0);
        qp.upper[0] = 0.25;
        qp.lower[1] = 0.0;
        let s = qp.solve(vec![0.0, 1.0], &[0], 50);
        assert_eq!(s.status, QpStatus::Optimal);
        assert!((s.x[0] - 0.25).abs() < 1e-9, "{:?}", s.x);
        assert!((s.x[1] - 0.75).abs() < 1e-9, "{:?}", s.x);
    }
}
