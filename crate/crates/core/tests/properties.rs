use dcbf_mpc::feasibility::{classify_state, PointStatus};
use dcbf_mpc::nlp::{solve, SolveStatus, SolverSettings};
use dcbf_mpc::simulator::rollout;
use dcbf_mpc::{
    barrier_halfspace, barrier_sphere, check_derivatives, control_step, lyapunov_quadratic, penalty_psi,
    transcribe, triple_integrator, ControllerConfig, Formulation, InputVec, ScalarField, StateVec, SystemModel,
};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn fields() -> (SystemModel, ScalarField, ScalarField, ScalarField) {
    (
        triple_integrator(0.1, -1.0, 1.0).unwrap(),
        barrier_halfspace(),
        barrier_sphere(),
        lyapunov_quadratic(DMatrix::identity(3, 3)).unwrap(),
    )
}

fn config(f: Formulation, gamma: f64) -> ControllerConfig {
    let c = ControllerConfig::new(f);
    let c = if f == Formulation::DclfDcbf { c } else { c.with_horizon(6) };
    if f.has_barrier() {
        c.with_gamma(gamma)
    } else {
        c
    }
}

fn state() -> impl Strategy<Value = [f64; 3]> {
    [-2.0..0.0f64, 0.0..2.0f64, 0.0..2.0f64]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn step_map_is_linear(
        x1 in prop::array::uniform3(-3.0..3.0f64),
        x2 in prop::array::uniform3(-3.0..3.0f64),
        u1 in -1.0..1.0f64,
        u2 in -1.0..1.0f64,
        a in -2.0..2.0f64,
        b in -2.0..2.0f64,
    ) {
        let (model, ..) = fields();
        let (x1, x2) = (StateVec::from_column_slice(&x1), StateVec::from_column_slice(&x2));
        let (u1, u2) = (InputVec::from_element(1, u1), InputVec::from_element(1, u2));
        let lhs = model.step(&(&x1 * a + &x2 * b), &(&u1 * a + &u2 * b));
        let rhs = model.step(&x1, &u1) * a + model.step(&x2, &u2) * b;
        prop_assert!((lhs - rhs).amax() <= 1e-12);
    }

    #[test]
    fn field_gradients_match_differences(x in state(), p in prop::array::uniform3(0.5..20.0f64)) {
        let (_, half, ball, _) = fields();
        let v = lyapunov_quadratic(DMatrix::from_diagonal(&DVector::from_column_slice(&p))).unwrap();
        for f in [&half, &ball, &v] {
            let g = f.gradient(&x);
            for i in 0..3 {
                let step = 1e-6 * x[i].abs().max(1.0);
                let (mut up, mut down) = (x, x);
                up[i] += step;
                down[i] -= step;
                let fd = (f.value(&up) - f.value(&down)) / (up[i] - down[i]);
                prop_assert!((g[i] - fd).abs() / fd.abs().max(1.0) <= 1e-5, "{} {i}", f.label());
            }
        }
    }

    #[test]
    fn analytic_gradients_match_differences(
        f in 0..6usize,
        sphere in any::<bool>(),
        x in state(),
        gamma in 0.01..1.0f64,
        seed in prop::collection::vec(-1.0..1.0f64, 64),
    ) {
        let (model, half, ball, v) = fields();
        let f = Formulation::ALL[f];
        let h = if sphere { &ball } else { &half };
        let t = transcribe(&config(f, gamma), &model, h, &v, &StateVec::from_column_slice(&x)).unwrap();
        let z: Vec<f64> = (0..t.problem.num_vars)
            .map(|i| {
                let (lo, hi) = (t.problem.var_lower[i].max(-2.0), t.problem.var_upper[i].min(2.0));
                lo + (hi - lo) * 0.5 * (1.0 + seed[i % seed.len()])
            })
            .collect();
        let r = check_derivatives(&t.problem, &z);
        prop_assert!(r.max_rel_error <= 1e-5, "{f}: {r:?}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn solves_are_deterministic(f in 0..6usize, x in state(), gamma in 0.05..0.3f64) {
        let (model, half, _, v) = fields();
        let t = transcribe(&config(Formulation::ALL[f], gamma), &model, &half, &v, &StateVec::from_column_slice(&x))
            .unwrap();
        let settings = SolverSettings::default();
        let (a, b) = (solve(&t.problem, &settings), solve(&t.problem, &settings));
        prop_assert_eq!(a.status, b.status);
        prop_assert_eq!(a.iterations, b.iterations);
        prop_assert!(a.z_opt.iter().zip(&b.z_opt).all(|(p, q)| p.to_bits() == q.to_bits()));
    }

    #[test]
    fn relaxation_never_loses_feasible_states(x in state(), gamma in 0.05..0.3f64) {
        let (model, half, _, v) = fields();
        let settings = SolverSettings::default();
        let classify = |f| classify_state(&config(f, gamma), &model, &half, &v, &x, &settings).unwrap().status;
        if classify(Formulation::MpcCbf) == PointStatus::Feasible {
            prop_assert_eq!(classify(Formulation::CbfNmpc), PointStatus::Feasible);
        }
    }

    #[test]
    fn omega_penalty_vanishes_only_at_one(omega in 0.0..3.0f64, weight in 1.0..1e4f64) {
        let p = penalty_psi(omega, weight);
        prop_assert!(p >= 0.0);
        prop_assert_eq!(p == 0.0, omega == 1.0);
    }
}

/// Re-solves every state visited by a warm-started closed loop from the
/// default guess and compares the statuses.
#[test]
fn warm_start_does_not_change_status() {
    let (model, half, ball, _) = fields();
    let v = lyapunov_quadratic(DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 10.0, 10.0]))).unwrap();
    let settings = SolverSettings::default();
    let with = |f: Formulation, g: f64| ControllerConfig::new(f).with_horizon(8).with_gamma(g);
    let scenarios = [
        (with(Formulation::CbfNmpc, 0.05), &half, [-2.0, 0.0, 1.0]),
        (with(Formulation::MpcCbf, 0.05), &half, [-2.0, 0.0, 1.0]),
        (with(Formulation::MpcCbf, 0.2), &half, [-2.0, 0.0, 1.0]),
        (with(Formulation::MpcGcbf, 0.1), &half, [-2.0, 0.0, 1.0]),
        (with(Formulation::ClfCbfNmpc, 0.1), &ball, [-2.0, 0.5, 0.5]),
    ];
    for (cfg, h, x0) in scenarios {
        let log = rollout(&cfg, &model, h, &v, &StateVec::from_column_slice(&x0), 40, &settings).unwrap();
        for r in &log.records {
            let cold = control_step(&cfg, &model, h, &v, &StateVec::from_column_slice(&r.state), &settings, None)
                .unwrap();
            assert_eq!(
                cold.status, r.status,
                "{} at step {} ({:?})",
                cfg.formulation, r.step, r.state
            );
        }
        if cfg.formulation == Formulation::CbfNmpc {
            assert!(log.records.iter().all(|r| r.status == SolveStatus::Optimal));
        }
    }
}
