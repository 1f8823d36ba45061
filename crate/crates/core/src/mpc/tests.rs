use super::*;
use crate::mogp::{train_mogp, Dataset, GatingParams, KernelParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn double_integrator(w: f64, x_box: (&[f64], &[f64]), u_max: f64) -> SystemModel {
    SystemModel::new(
        DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 1.0]),
        DMatrix::from_row_slice(2, 1, &[0.5, 1.0]),
        BoxSet::from_slices(x_box.0, x_box.1).unwrap(),
        BoxSet::symmetric(1, u_max).unwrap().to_polytope(),
        BoxSet::symmetric(2, w).unwrap(),
    )
    .unwrap()
}

fn config(horizon: usize) -> MPCConfig {
    MPCConfig::new(
        horizon,
        DMatrix::identity(2, 2),
        DMatrix::from_element(1, 1, 0.1),
        0.2,
    )
}

fn robust(sys: SystemModel, cfg: MPCConfig) -> ControllerState {
    setup_controller(sys, cfg, TighteningMode::RobustTube).unwrap()
}

#[test]
fn disturbance_free_sets_equal_originals() {
    let sys = double_integrator(0.0, (&[-7.0, -3.0], &[0.0, 2.0]), 5.0);
    let ctrl = robust(sys, config(5));
    let xt = ctrl.state_tight().as_box().unwrap();
    assert!((xt.lower() - DVector::from_vec(vec![-7.0, -3.0])).amax() < 1e-12);
    assert!((xt.upper() - DVector::from_vec(vec![0.0, 2.0])).amax() < 1e-12);
    let ut = ctrl.input_tight().as_box().unwrap();
    assert!((ut.upper()[0] - 5.0).abs() < 1e-6);
    assert!(ctrl.mrpi().polytope.contains(&DVector::zeros(2), 1e-12));
    assert_eq!(ctrl.terminal().anchor_state, DVector::zeros(2));
}

#[test]
fn numerical_system_sets_nonempty() {
    let sys = double_integrator(0.8, (&[-7.0, -3.0], &[0.0, 2.0]), 5.0);
    let mut cfg = config(10);
    cfg.mrpi_eps = 1e-9;
    let ctrl = robust(sys, cfg);
    assert!(!ctrl.state_tight().is_empty());
    assert!(!ctrl.input_tight().is_empty());
    assert!(!ctrl.terminal().set.is_empty());
    let s_e = &ctrl.terminal().anchor_state;
    assert!(ctrl.terminal().set.contains(s_e, 1e-9));
    assert!(s_e[0] < -2.125);
}

#[test]
fn oversized_disturbance_reports_empty_set() {
    let sys = double_integrator(3.0, (&[-7.0, -3.0], &[0.0, 2.0]), 5.0);
    match setup_controller(sys, config(5), TighteningMode::RobustTube) {
        Err(MpcError::EmptySet(name)) => assert!(name.contains('X') || name.contains('U')),
        other => panic!("expected empty set error, got {other:?}"),
    }
}

#[test]
fn short_horizon_rejected() {
    let sys = double_integrator(0.0, (&[-7.0, -3.0], &[0.0, 2.0]), 5.0);
    assert!(matches!(
        setup_controller(sys, config(1), TighteningMode::RobustTube),
        Err(MpcError::Config(_))
    ));
}

#[test]
fn origin_is_optimal_at_origin() {
    let sys = double_integrator(0.0, (&[-7.0, -3.0], &[0.0, 2.0]), 5.0);
    let ctrl = robust(sys, config(2));
    let sol = solve_step(&ctrl, &DVector::zeros(2)).unwrap();
    assert!(sol.is_optimal());
    assert!(sol.input.amax() < 1e-7);
    assert!(sol.objective.abs() < 1e-12);
}

#[test]
fn zero_disturbance_model_gives_zero_offsets() {
    let sys = double_integrator(0.0, (&[-7.0, -3.0], &[0.0, 2.0]), 5.0);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let inputs = DMatrix::from_fn(12, 2, |_, c| if c == 0 { rng.gen_range(-7.0..0.0) } else { rng.gen_range(-3.0..2.0) });
    let data = Dataset::new(inputs, DMatrix::zeros(12, 2), BoxSet::origin(2)).unwrap();
    let model = train_mogp(
        &data,
        GatingParams::new(1.0, 1.0).unwrap(),
        KernelParams::isotropic(2, 1.0, 0.1, 1e-4).unwrap(),
        1,
        5,
    )
    .unwrap();
    let ctrl = setup_controller(sys, config(3), TighteningMode::Distributional(Arc::new(model))).unwrap();
    let sol = solve_step(&ctrl, &DVector::zeros(2)).unwrap();
    let eta = sol.offsets.as_ref().unwrap();
    assert!(eta.lower.iter().chain(&eta.upper).all(|v| v.abs() < 1e-6));
    assert!(sol.input.amax() < 1e-6);
    assert!(sol.objective.abs() < 1e-10);
}

/// Minimizes the horizon cost with `s_0 = x` and no inequality constraints
/// by stacking the predictions `s = Φ x + Γ v` and solving the normal
/// equations.
fn batch_least_squares(ctrl: &ControllerState, x: &DVector<f64>) -> Vec<f64> {
    let (a, b) = (&ctrl.system().a, &ctrl.system().b);
    let n = a.nrows();
    let m = b.ncols();
    let h = ctrl.config().horizon;
    let mut phi = DMatrix::zeros(n * (h + 1), n);
    let mut gamma = DMatrix::zeros(n * (h + 1), m * h);
    let mut power = DMatrix::identity(n, n);
    for k in 0..=h {
        phi.view_mut((k * n, 0), (n, n)).copy_from(&power);
        for j in 0..k {
            let mut ak = DMatrix::identity(n, n);
            for _ in 0..(k - 1 - j) {
                ak = a * ak;
            }
            gamma.view_mut((k * n, j * m), (n, m)).copy_from(&(ak * b));
        }
        power = a * power;
    }
    let mut qbar = DMatrix::zeros(n * (h + 1), n * (h + 1));
    for k in 0..h {
        qbar.view_mut((k * n, k * n), (n, n)).copy_from(&ctrl.config().q);
    }
    qbar.view_mut((h * n, h * n), (n, n)).copy_from(ctrl.terminal_weight());
    let mut rbar = DMatrix::zeros(m * h, m * h);
    for k in 0..h {
        rbar.view_mut((k * m, k * m), (m, m)).copy_from(&ctrl.config().r);
    }
    let hess = gamma.transpose() * &qbar * &gamma + rbar;
    let grad = gamma.transpose() * &qbar * &phi * x;
    let v = -hess.lu().solve(&grad).unwrap();
    v.iter().copied().collect()
}

#[test]
fn loose_constraints_match_batch_least_squares() {
    let sys = double_integrator(0.0, (&[-50.0, -50.0], &[50.0, 50.0]), 100.0);
    let ctrl = robust(sys, config(6));
    let x = DVector::from_vec(vec![-3.0, 1.5]);
    let sol = solve_step(&ctrl, &x).unwrap();
    assert!((sol.s0() - &x).amax() < 1e-7);
    let oracle = batch_least_squares(&ctrl, &x);
    for (k, v) in sol.nominal_inputs.iter().enumerate() {
        assert!((v[0] - oracle[k]).abs() < 1e-6, "step {k}: {} vs {}", v[0], oracle[k]);
    }
    // With the Riccati terminal weight the plan is the LQR policy.
    let lqr = ctrl.gain() * &x;
    assert!((sol.nominal_inputs[0][0] - lqr[0]).abs() < 1e-6);
}

#[test]
fn far_state_is_infeasible() {
    let sys = double_integrator(0.5, (&[-7.0, -3.0], &[0.0, 2.0]), 5.0);
    let ctrl = robust(sys, config(5));
    let sol = solve_step(&ctrl, &DVector::from_vec(vec![40.0, 40.0])).unwrap();
    assert_eq!(sol.status, StepStatus::Infeasible);
    assert!(control_law(&sol, &DVector::zeros(2), ctrl.gain()).is_err());
}

#[test]
fn control_law_cases() {
    let sys = double_integrator(0.5, (&[-7.0, -3.0], &[0.0, 2.0]), 5.0);
    let ctrl = robust(sys, config(5));
    let x = DVector::from_vec(vec![-4.0, -1.0]);
    let sol = solve_step(&ctrl, &x).unwrap();
    let s0 = sol.s0().clone();
    let v0 = sol.nominal_inputs[0].clone();
    assert_eq!(control_law(&sol, &s0, ctrl.gain()).unwrap(), v0);
    assert_eq!(control_law(&sol, &x, &DMatrix::zeros(1, 2)).unwrap(), v0);
    assert_eq!(control_law(&sol, &x, ctrl.gain()).unwrap(), sol.input);
}

#[test]
fn robust_closed_loop_keeps_invariants() {
    let sys = double_integrator(0.5, (&[-7.0, -3.0], &[0.0, 2.0]), 5.0);
    let ctrl = robust(sys.clone(), config(6));
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut x = DVector::from_vec(vec![-5.0, -2.0]);
    let mut prev: Option<StepSolution> = None;
    for _ in 0..12 {
        let sol = solve_step(&ctrl, &x).unwrap();
        assert!(sol.is_optimal());
        assert!(ctrl.mrpi().polytope.contains(&(&x - sol.s0()), 1e-7));
        assert!(sys.input.violation(&sol.input) <= 1e-9);
        if let Some(prev) = &prev {
            let (s0, inputs) = shifted_candidate(&ctrl, prev).unwrap();
            assert!(plan_violation(&ctrl, &x, &s0, &inputs, None) <= 1e-7);
        }
        let w = DVector::from_fn(2, |_, _| rng.gen_range(-0.5..=0.5));
        x = sys.step(&x, &sol.input, &w);
        assert!(sys.state.contains(&x, 1e-7));
        prev = Some(sol);
    }
}

#[test]
fn relaxed_solve_recovers_from_infeasibility() {
    let sys = double_integrator(0.8, (&[-7.0, -3.0], &[0.0, 2.0]), 5.0);
    let mut cfg = config(10);
    cfg.mrpi_eps = 1e-9;
    let ctrl = robust(sys.clone(), cfg);
    let x = DVector::from_vec(vec![-5.0, -2.0]);
    assert_eq!(solve_step(&ctrl, &x).unwrap().status, StepStatus::Infeasible);
    let sol = solve_relaxed(&ctrl, &x).unwrap();
    assert!(sol.is_optimal());
    assert!(sol.relaxation > 1e-6);
    assert!(ctrl.mrpi().polytope.contains(&(&x - sol.s0()), 1e-7));
    assert!(sys.input.violation(&sol.input) <= 1e-9);
}

#[test]
fn relaxed_solve_matches_strict_when_feasible() {
    let sys = double_integrator(0.5, (&[-7.0, -3.0], &[0.0, 2.0]), 5.0);
    let ctrl = robust(sys, config(5));
    let x = DVector::from_vec(vec![-4.0, -1.0]);
    let strict = solve_step(&ctrl, &x).unwrap();
    let relaxed = solve_relaxed(&ctrl, &x).unwrap();
    assert!(relaxed.relaxation < 1e-7);
    assert!((strict.input.clone() - relaxed.input).amax() < 1e-5);
    assert_eq!(strict.relaxation, 0.0);
}
