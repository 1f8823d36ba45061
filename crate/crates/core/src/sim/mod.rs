//! Closed-loop simulation: disturbance generators, the three controllers,
//! single runs and paired multi-run campaigns.

mod disturbance;
mod report;

pub use disturbance::{
    collect_training_data, franke, franke_terms, sample_disturbance, DisturbanceKind,
    DisturbanceSpec, REJECTION_CAP,
};
pub use report::{write_summary_csv, write_timing_csv, write_trajectory_csv};

use std::sync::Arc;
use std::time::Instant;

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mogp::{train_mogp_with, Dataset, GatingParams, KernelParams, MoGPModel, MogpError, TrainOptions};
use crate::mpc::{
    setup_controller, solve_relaxed, solve_step, ControllerState, MPCConfig, MpcError,
    SystemModel, TighteningMode,
};

pub const MOGP_DR: &str = "mogp-dr";
pub const GP_DR: &str = "gp-dr";
pub const ROBUST_TUBE: &str = "robust-tube";
pub const CONTROLLER_NAMES: [&str; 3] = [MOGP_DR, GP_DR, ROBUST_TUBE];

/// Tolerance of the state-constraint check on visited states.
pub const STATE_CHECK_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Mpc(#[from] MpcError),
    #[error(transparent)]
    Mogp(#[from] MogpError),
    #[error("output error: {0}")]
    Output(String),
}

impl From<csv::Error> for SimError {
    fn from(e: csv::Error) -> Self {
        SimError::Output(e.to_string())
    }
}

impl From<std::io::Error> for SimError {
    fn from(e: std::io::Error) -> Self {
        SimError::Output(e.to_string())
    }
}

/// Disturbance-model training settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingSettings {
    pub n_points: usize,
    pub seed: u64,
    pub sweeps: usize,
    /// Width of the gating kernel.
    pub kernel_width: f64,
    /// Dirichlet-process concentration `α`.
    pub concentration: f64,
    pub lengthscale: f64,
    pub signal_variance: f64,
    pub noise_variance: f64,
}

impl TrainingSettings {
    /// Trains the mixture model; `max_experts = Some(1)` gives a single GP
    /// per dimension.
    pub fn train(&self, data: &Dataset, max_experts: Option<usize>) -> Result<MoGPModel, SimError> {
        let gating = GatingParams::new(self.kernel_width, self.concentration)?;
        let kernel = KernelParams::isotropic(
            data.input_dim(),
            self.lengthscale,
            self.signal_variance,
            self.noise_variance,
        )?;
        let opts = TrainOptions {
            sweeps: self.sweeps,
            max_experts,
            ..TrainOptions::default()
        };
        Ok(train_mogp_with(data, gating, kernel, self.seed, &opts)?)
    }
}

/// A named controller ready for closed-loop use.
#[derive(Clone, Debug)]
pub struct Controller {
    pub name: String,
    pub state: ControllerState,
}

/// GP-based DR controller (one expert per dimension) and the robust tube
/// controller, sharing `K`, `𝒵` and `𝒳_f` with `base`.
pub fn build_baselines(
    base: &ControllerState,
    data: &Dataset,
    settings: &TrainingSettings,
) -> Result<(Controller, Controller), SimError> {
    let gp = settings.train(data, Some(1))?;
    Ok((
        Controller {
            name: GP_DR.into(),
            state: base.with_mode(TighteningMode::Distributional(Arc::new(gp))),
        },
        Controller {
            name: ROBUST_TUBE.into(),
            state: base.with_mode(TighteningMode::RobustTube),
        },
    ))
}

/// All three controllers, in the order of [`CONTROLLER_NAMES`].
pub fn build_controllers(
    sys: &SystemModel,
    cfg: &MPCConfig,
    data: &Dataset,
    settings: &TrainingSettings,
) -> Result<Vec<Controller>, SimError> {
    let base = setup_controller(sys.clone(), cfg.clone(), TighteningMode::RobustTube)?;
    let mogp = settings.train(data, None)?;
    let (gp, robust) = build_baselines(&base, data, settings)?;
    Ok(vec![
        Controller {
            name: MOGP_DR.into(),
            state: base.with_mode(TighteningMode::Distributional(Arc::new(mogp))),
        },
        gp,
        robust,
    ])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepOutcome {
    Optimal,
    /// The problem was infeasible and the input of the relaxed problem was
    /// applied.
    Fallback,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub state: Vec<f64>,
    /// Nominal initial state `s_0*`.
    pub nominal: Vec<f64>,
    pub input: Vec<f64>,
    pub disturbance: Vec<f64>,
    pub stage_cost: f64,
    /// First-step offsets; empty for the robust tube.
    pub eta_lower: Vec<f64>,
    pub eta_upper: Vec<f64>,
    pub outcome: StepOutcome,
    /// Plan cost `J*`, of the relaxed plan after a fallback.
    pub objective: f64,
    /// Constraint relaxation used by a fallback; zero otherwise.
    pub relaxation: f64,
    pub solve_seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryLog {
    pub controller: String,
    pub seed: u64,
    pub steps: Vec<StepRecord>,
    pub final_state: Vec<f64>,
    pub total_cost: f64,
    /// Visited successor states outside `𝕏`.
    pub violations: usize,
    pub fallbacks: usize,
    pub aborted: Option<String>,
}

impl TrajectoryLog {
    pub fn feasible(&self) -> bool {
        self.fallbacks == 0 && self.aborted.is_none()
    }

    pub fn states(&self) -> Vec<Vec<f64>> {
        self.steps
            .iter()
            .map(|s| s.state.clone())
            .chain(std::iter::once(self.final_state.clone()))
            .collect()
    }
}

/// Simulates `x⁺ = Ax + Bu + w(x)` for `steps` steps from `x0`.
///
/// The disturbance stream is seeded with `seed` alone, so runs of different
/// controllers with the same seed share their random numbers. When the
/// problem is infeasible the relaxed problem supplies the input. A solver
/// breakdown ends the run early with the reason recorded.
pub fn run_closed_loop(
    ctrl: &Controller,
    spec: &DisturbanceSpec,
    x0: &DVector<f64>,
    steps: usize,
    seed: u64,
) -> Result<TrajectoryLog, SimError> {
    let sys = ctrl.state.system();
    let cfg = ctrl.state.config();
    if x0.len() != sys.state_dim() || !sys.state.contains(x0, STATE_CHECK_TOL) {
        return Err(SimError::Config(format!("initial state {x0} is not in the state set")));
    }
    if spec.dim() != sys.state_dim() {
        return Err(SimError::Config("disturbance dimension does not match the state".into()));
    }
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = x0.clone();
    let mut records = Vec::with_capacity(steps);
    let mut total = 0.0;
    let mut violations = 0;
    let mut fallbacks = 0;
    let mut aborted = None;

    for step in 0..steps {
        let start = Instant::now();
        let solved = solve_step(&ctrl.state, &x).and_then(|sol| {
            if sol.is_optimal() {
                Ok((sol, StepOutcome::Optimal))
            } else {
                log::debug!("{} seed {seed} step {step}: infeasible at {x}, solving relaxed", ctrl.name);
                solve_relaxed(&ctrl.state, &x).map(|sol| (sol, StepOutcome::Fallback))
            }
        });
        let (sol, outcome) = match solved {
            Ok(pair) if pair.0.is_optimal() => pair,
            Ok(_) => {
                aborted = Some(format!("step {step}: relaxed problem infeasible"));
                break;
            }
            Err(e) => {
                log::warn!("{} seed {seed} step {step}: aborting: {e}", ctrl.name);
                aborted = Some(format!("step {step}: {e}"));
                break;
            }
        };
        if outcome == StepOutcome::Fallback {
            fallbacks += 1;
        }
        let input = sol.input.clone();
        let solve_seconds = start.elapsed().as_secs_f64();
        let w = sample_disturbance(spec, &x, &mut rng);
        let stage = x.dot(&(&cfg.q * &x)) + input.dot(&(&cfg.r * &input));
        total += stage;
        let (eta_lower, eta_upper) = sol
            .offsets
            .as_ref()
            .map(|o| (o.lower.clone(), o.upper.clone()))
            .unwrap_or_default();
        let next = sys.step(&x, &input, &w);
        if !sys.state.contains(&next, STATE_CHECK_TOL) {
            violations += 1;
        }
        records.push(StepRecord {
            step,
            state: x.as_slice().to_vec(),
            nominal: sol.s0().as_slice().to_vec(),
            input: input.as_slice().to_vec(),
            disturbance: w.as_slice().to_vec(),
            stage_cost: stage,
            eta_lower,
            eta_upper,
            outcome,
            objective: sol.objective,
            relaxation: sol.relaxation,
            solve_seconds,
        });
        x = next;
    }

    Ok(TrajectoryLog {
        controller: ctrl.name.clone(),
        seed,
        steps: records,
        final_state: x.as_slice().to_vec(),
        total_cost: total,
        violations,
        fallbacks,
        aborted,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControllerSummary {
    pub controller: String,
    pub runs: usize,
    pub mean_cost: f64,
    pub median_cost: f64,
    pub std_cost: f64,
    /// Fraction of simulated steps whose successor state left `𝕏`.
    pub violation_rate: f64,
    pub fallbacks: usize,
    pub aborted_runs: usize,
    pub mean_solve_seconds: f64,
}

impl ControllerSummary {
    fn from_logs(name: &str, logs: &[TrajectoryLog]) -> Self {
        let mut costs: Vec<f64> = logs.iter().map(|l| l.total_cost).collect();
        let runs = costs.len();
        let mean = costs.iter().sum::<f64>() / runs.max(1) as f64;
        let var = if runs > 1 {
            costs.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / (runs - 1) as f64
        } else {
            0.0
        };
        costs.sort_by(f64::total_cmp);
        let median = match runs {
            0 => f64::NAN,
            r if r % 2 == 1 => costs[r / 2],
            r => 0.5 * (costs[r / 2 - 1] + costs[r / 2]),
        };
        let steps: usize = logs.iter().map(|l| l.steps.len()).sum();
        let violations: usize = logs.iter().map(|l| l.violations).sum();
        let seconds: f64 = logs.iter().flat_map(|l| &l.steps).map(|s| s.solve_seconds).sum();
        Self {
            controller: name.to_string(),
            runs,
            mean_cost: mean,
            median_cost: median,
            std_cost: var.sqrt(),
            violation_rate: if steps == 0 { 0.0 } else { violations as f64 / steps as f64 },
            fallbacks: logs.iter().map(|l| l.fallbacks).sum(),
            aborted_runs: logs.iter().filter(|l| l.aborted.is_some()).count(),
            mean_solve_seconds: if steps == 0 { 0.0 } else { seconds / steps as f64 },
        }
    }

    /// Relative cost reduction of this controller against `other`.
    pub fn reduction_against(&self, other: &ControllerSummary) -> f64 {
        (other.mean_cost - self.mean_cost) / other.mean_cost
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CampaignResult {
    pub summaries: Vec<ControllerSummary>,
    /// Per controller, the logs ordered by run index.
    pub logs: Vec<Vec<TrajectoryLog>>,
}

impl CampaignResult {
    pub fn summary(&self, name: &str) -> Option<&ControllerSummary> {
        self.summaries.iter().find(|s| s.controller == name)
    }

    pub fn logs_for(&self, name: &str) -> Option<&[TrajectoryLog]> {
        self.summaries
            .iter()
            .position(|s| s.controller == name)
            .map(|i| self.logs[i].as_slice())
    }
}

/// Runs every controller `n_runs` times; run `r` uses seed `base_seed + r`
/// for all controllers.
pub fn run_campaign(
    controllers: &[Controller],
    spec: &DisturbanceSpec,
    x0: &DVector<f64>,
    steps: usize,
    n_runs: usize,
    base_seed: u64,
) -> Result<CampaignResult, SimError> {
    if n_runs == 0 {
        return Err(SimError::Config("a campaign needs at least one run".into()));
    }
    let jobs: Vec<(usize, usize)> = (0..controllers.len())
        .flat_map(|c| (0..n_runs).map(move |r| (c, r)))
        .collect();
    let results: Vec<Result<TrajectoryLog, SimError>> = jobs
        .par_iter()
        .map(|&(c, r)| run_closed_loop(&controllers[c], spec, x0, steps, base_seed.wrapping_add(r as u64)))
        .collect();
    let mut logs: Vec<Vec<TrajectoryLog>> = vec![Vec::with_capacity(n_runs); controllers.len()];
    for (&(c, _), res) in jobs.iter().zip(results) {
        logs[c].push(res?);
    }
    let summaries = controllers
        .iter()
        .zip(&logs)
        .map(|(ctrl, l)| ControllerSummary::from_logs(&ctrl.name, l))
        .collect();
    Ok(CampaignResult { summaries, logs })
}

#[cfg(test)]
mod tests;
