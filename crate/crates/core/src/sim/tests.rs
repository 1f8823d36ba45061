use super::*;
use crate::config::ExperimentConfig;
use crate::mpc::ControllerState;

fn disturbance_free_controller() -> Controller {
    let mut cfg = ExperimentConfig::preset("numerical").unwrap();
    cfg.system.disturbance_lower = vec![0.0; 2];
    cfg.system.disturbance_upper = vec![0.0; 2];
    let state = setup_controller(
        cfg.build_system().unwrap(),
        cfg.build_mpc_config().unwrap(),
        TighteningMode::RobustTube,
    )
    .unwrap();
    Controller { name: ROBUST_TUBE.into(), state }
}

/// The numerical case study with a small training set and short runs.
fn small_campaign() -> (ExperimentConfig, Vec<Controller>) {
    let mut cfg = ExperimentConfig::preset("numerical").unwrap();
    cfg.training.n_points = 40;
    cfg.training.sweeps = 10;
    let sys = cfg.build_system().unwrap();
    let mpc = cfg.build_mpc_config().unwrap();
    let data = collect_training_data(&sys, &cfg.disturbance, cfg.training.n_points, cfg.training.seed).unwrap();
    let ctrls = build_controllers(&sys, &mpc, &data, &cfg.training).unwrap();
    (cfg, ctrls)
}

fn without_timing(mut logs: Vec<Vec<TrajectoryLog>>) -> Vec<Vec<TrajectoryLog>> {
    for s in logs.iter_mut().flatten().flat_map(|l| l.steps.iter_mut()) {
        s.solve_seconds = 0.0;
    }
    logs
}

#[test]
fn zero_disturbance_at_origin_costs_nothing() {
    let ctrl = disturbance_free_controller();
    let log = run_closed_loop(&ctrl, &DisturbanceSpec::zero(2), &DVector::zeros(2), 10, 0).unwrap();
    assert_eq!(log.steps.len(), 10);
    assert!(log.feasible());
    assert!(log.total_cost < 1e-12);
    assert!(log.final_state.iter().all(|v| v.abs() < 1e-7));
}

#[test]
fn disturbance_free_run_converges_with_decreasing_cost() {
    let ctrl = disturbance_free_controller();
    let x0 = DVector::from_vec(vec![-5.0, -2.0]);
    let log = run_closed_loop(&ctrl, &DisturbanceSpec::zero(2), &x0, 30, 0).unwrap();
    assert!(log.feasible());
    assert_eq!(log.violations, 0);
    for pair in log.steps.windows(2) {
        let (now, next) = (&pair[0], &pair[1]);
        assert!(next.objective <= now.objective - now.stage_cost + 1e-6 * now.objective.max(1.0));
    }
    assert!(log.final_state.iter().all(|v| v.abs() < 1e-3), "{:?}", log.final_state);
}

#[test]
fn initial_state_outside_constraints_rejected() {
    let ctrl = disturbance_free_controller();
    let x0 = DVector::from_vec(vec![1.0, 0.0]);
    assert!(matches!(
        run_closed_loop(&ctrl, &DisturbanceSpec::zero(2), &x0, 5, 0),
        Err(SimError::Config(_))
    ));
    let x0 = DVector::from_vec(vec![-5.0, -2.0]);
    assert!(run_closed_loop(&ctrl, &DisturbanceSpec::zero(4), &x0, 5, 0).is_err());
}

#[test]
fn controllers_share_tube_ingredients() {
    let (_, ctrls) = small_campaign();
    let names: Vec<&str> = ctrls.iter().map(|c| c.name.as_str()).collect();
    assert_eq!(names, CONTROLLER_NAMES);
    let first: &ControllerState = &ctrls[0].state;
    for c in &ctrls[1..] {
        assert_eq!(c.state.gain(), first.gain());
        assert_eq!(c.state.mrpi().polytope, first.mrpi().polytope);
        assert_eq!(c.state.terminal().set, first.terminal().set);
        assert_eq!(c.state.terminal_weight(), first.terminal_weight());
    }
    match ctrls[1].state.mode() {
        TighteningMode::Distributional(m) => assert!(m.expert_counts().iter().all(|&k| k == 1)),
        TighteningMode::RobustTube => panic!("GP baseline must use a disturbance model"),
    }
    assert!(matches!(ctrls[2].state.mode(), TighteningMode::RobustTube));
}

#[test]
fn campaign_is_deterministic_and_paired() {
    let (cfg, ctrls) = small_campaign();
    let x0 = cfg.x0();
    let a = run_campaign(&ctrls, &cfg.disturbance, &x0, 6, 3, 500).unwrap();
    let b = run_campaign(&ctrls, &cfg.disturbance, &x0, 6, 3, 500).unwrap();
    assert_eq!(without_timing(a.logs.clone()), without_timing(b.logs));
    assert_eq!(a.summaries.len(), 3);
    for (c, logs) in a.logs.iter().enumerate() {
        assert_eq!(logs.len(), 3);
        for (r, log) in logs.iter().enumerate() {
            assert_eq!(log.seed, 500 + r as u64);
            assert_eq!(log.controller, CONTROLLER_NAMES[c]);
            assert!(log.aborted.is_none());
            assert_eq!(log.steps.len(), 6);
        }
    }
    // Same seed and same initial state give the same first disturbance.
    for r in 0..3 {
        let w0: Vec<&Vec<f64>> = a.logs.iter().map(|l| &l[r].steps[0].disturbance).collect();
        assert!(w0.windows(2).all(|p| p[0] == p[1]));
    }
    let robust = a.logs_for(ROBUST_TUBE).unwrap();
    assert!(robust.iter().flat_map(|l| &l.steps).all(|s| s.eta_lower.is_empty()));
    let mogp = a.logs_for(MOGP_DR).unwrap();
    assert!(mogp.iter().flat_map(|l| &l.steps).all(|s| s.eta_upper.len() == 2));
    assert!(run_campaign(&ctrls, &cfg.disturbance, &x0, 6, 0, 500).is_err());
}

#[test]
fn summary_statistics() {
    let log = |cost: f64, violations: usize| TrajectoryLog {
        controller: "c".into(),
        seed: 0,
        steps: vec![
            StepRecord {
                step: 0,
                state: vec![0.0],
                nominal: vec![0.0],
                input: vec![0.0],
                disturbance: vec![0.0],
                stage_cost: cost,
                eta_lower: Vec::new(),
                eta_upper: Vec::new(),
                outcome: StepOutcome::Optimal,
                objective: 0.0,
                relaxation: 0.0,
                solve_seconds: 0.5,
            };
            2
        ],
        final_state: vec![0.0],
        total_cost: cost,
        violations,
        fallbacks: 0,
        aborted: None,
    };
    let s = ControllerSummary::from_logs("c", &[log(1.0, 0), log(2.0, 1), log(6.0, 0)]);
    assert_eq!(s.runs, 3);
    assert!((s.mean_cost - 3.0).abs() < 1e-12);
    assert_eq!(s.median_cost, 2.0);
    assert!((s.std_cost - 7f64.sqrt()).abs() < 1e-12);
    assert!((s.violation_rate - 1.0 / 6.0).abs() < 1e-12);
    assert!((s.mean_solve_seconds - 0.5).abs() < 1e-12);
    let base = ControllerSummary { mean_cost: 4.0, ..s.clone() };
    assert!((s.reduction_against(&base) - 0.25).abs() < 1e-12);
}

#[test]
fn csv_outputs() {
    let ctrl = disturbance_free_controller();
    let x0 = DVector::from_vec(vec![-5.0, -2.0]);
    let log = run_closed_loop(&ctrl, &DisturbanceSpec::zero(2), &x0, 4, 0).unwrap();
    let mut buf = Vec::new();
    write_trajectory_csv(&log, &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 5);
    assert_eq!(
        lines[0],
        "step,x_0,x_1,s0_0,s0_1,u_0,w_0,w_1,stage_cost,eta_lower_0,eta_lower_1,eta_upper_0,eta_upper_1,outcome,objective,relaxation"
    );
    assert!(lines[1].starts_with("0,-5e0,-2e0,"));
    assert!(lines[1].contains(",,,,,optimal,"));

    let result = CampaignResult {
        summaries: vec![ControllerSummary::from_logs(ROBUST_TUBE, std::slice::from_ref(&log))],
        logs: vec![vec![log]],
    };
    let mut buf = Vec::new();
    write_summary_csv(&result, &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert_eq!(text.lines().count(), 2);
    assert!(text.lines().nth(1).unwrap().starts_with("robust-tube,1,"));
    let mut buf = Vec::new();
    write_timing_csv(&result, &mut buf).unwrap();
    assert!(String::from_utf8(buf).unwrap().starts_with("controller,mean_solve_seconds\n"));
}
