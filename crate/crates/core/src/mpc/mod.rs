//! Tube MPC with a distributionally robust first-step constraint.
//!
//! The nominal trajectory `s_{k+1} = A s_k + B v_k` is planned over the
//! horizon and the applied input is `u = K (x - s_0) + v_0`. The first
//! predicted state is constrained through CVaR offsets computed from the
//! disturbance model at the current state; later steps use the worst-case
//! tube tightening `X ⊖ Z` and `U ⊖ K Z`.

mod anchor;
mod riccati;

use std::sync::Arc;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::conic::{solve_socp, ConicProgram, ConicStatus};
use crate::drcvar::{build_offsets, DrcvarError, TighteningOffsets};
use crate::geometry::{
    mrpi_zonotope, pontryagin_diff, terminal_set_about, BoxSet, ClosedLoopMatrix, GeometryError,
    MrpiApprox, Polytope, TerminalSet, ANCHOR_SNAP_TOL, TERMINAL_MAX_ITER,
};
use crate::mogp::{predict_disturbance, MoGPModel};

pub use anchor::{select_anchor, DEFAULT_ANCHOR_MARGIN};
pub use riccati::{riccati_gain, riccati_residual, RICCATI_TOL};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MpcError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("empty tightened set: {0}")]
    EmptySet(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Drcvar(#[from] DrcvarError),
    #[error("conic solver returned {0:?}")]
    Solver(ConicStatus),
    #[error("contract violation: {0}")]
    Contract(String),
}

/// `x⁺ = A x + B u + w(x)` with state box `X`, input polytope `U` and
/// disturbance support box `W`.
#[derive(Clone, Debug)]
pub struct SystemModel {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub state: BoxSet,
    pub input: Polytope,
    pub disturbance: BoxSet,
}

impl SystemModel {
    pub fn new(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        state: BoxSet,
        input: Polytope,
        disturbance: BoxSet,
    ) -> Result<Self, MpcError> {
        let n = a.nrows();
        let m = b.ncols();
        if a.ncols() != n || b.nrows() != n {
            return Err(MpcError::Config(format!(
                "A is {}x{}, B is {}x{}",
                a.nrows(),
                a.ncols(),
                b.nrows(),
                b.ncols()
            )));
        }
        if state.dim() != n || disturbance.dim() != n || input.dim() != m {
            return Err(MpcError::Config(
                "constraint set dimensions do not match the system".into(),
            ));
        }
        if state.is_empty() || input.is_empty() || disturbance.is_empty() {
            return Err(MpcError::Config("constraint sets must be nonempty".into()));
        }
        if !a.iter().chain(b.iter()).all(|v| v.is_finite()) {
            return Err(MpcError::Config("system matrices must be finite".into()));
        }
        Ok(Self {
            a,
            b,
            state,
            input,
            disturbance,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.b.ncols()
    }

    pub fn step(&self, x: &DVector<f64>, u: &DVector<f64>, w: &DVector<f64>) -> DVector<f64> {
        &self.a * x + &self.b * u + w
    }
}

#[derive(Clone, Debug)]
pub struct MPCConfig {
    pub horizon: usize,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    /// Terminal weight; the Riccati solution when `None`.
    pub terminal_weight: Option<DMatrix<f64>>,
    /// CVaR risk level `ε`.
    pub risk_level: f64,
    /// Accuracy of the invariant-set outer approximation.
    pub mrpi_eps: f64,
    pub solver_tol: f64,
    /// Fraction of the attainable facet slack the terminal anchor keeps.
    pub anchor_margin: f64,
    /// Extra tightening of the nominal input set that absorbs the solver's
    /// feasibility tolerance, so applied inputs meet `U` exactly.
    pub input_backoff: f64,
}

impl MPCConfig {
    pub fn new(horizon: usize, q: DMatrix<f64>, r: DMatrix<f64>, risk_level: f64) -> Self {
        Self {
            horizon,
            q,
            r,
            terminal_weight: None,
            risk_level,
            mrpi_eps: 1e-2,
            solver_tol: 1e-10,
            anchor_margin: DEFAULT_ANCHOR_MARGIN,
            input_backoff: 1e-7,
        }
    }

    pub fn validate(&self, n: usize, m: usize) -> Result<(), MpcError> {
        if self.horizon < 2 {
            return Err(MpcError::Config(format!(
                "horizon must be at least 2, got {}",
                self.horizon
            )));
        }
        if self.q.shape() != (n, n) || self.r.shape() != (m, m) {
            return Err(MpcError::Config("weight matrices have wrong shapes".into()));
        }
        anchor::cholesky_factor(&self.q, "Q")?;
        anchor::cholesky_factor(&self.r, "R")?;
        if let Some(p) = &self.terminal_weight {
            if p.shape() != (n, n) {
                return Err(MpcError::Config("terminal weight has wrong shape".into()));
            }
            anchor::cholesky_factor(p, "P")?;
        }
        if !(self.risk_level > 0.0 && self.risk_level < 1.0) {
            return Err(MpcError::Config(format!(
                "risk level must lie in (0, 1), got {}",
                self.risk_level
            )));
        }
        if !(self.mrpi_eps > 0.0 && self.mrpi_eps < 1.0) {
            return Err(MpcError::Config("mRPI accuracy must lie in (0, 1)".into()));
        }
        if !(self.solver_tol > 0.0) || !(self.anchor_margin >= 0.0 && self.anchor_margin < 1.0) {
            return Err(MpcError::Config("invalid solver tolerance or anchor margin".into()));
        }
        if !(self.input_backoff >= 0.0) {
            return Err(MpcError::Config("input back-off must be nonnegative".into()));
        }
        Ok(())
    }
}

/// How the first predicted state is constrained.
#[derive(Clone)]
pub enum TighteningMode {
    /// CVaR offsets from the learned disturbance model.
    Distributional(Arc<MoGPModel>),
    /// Worst-case tube tightening at every step.
    RobustTube,
}

impl std::fmt::Debug for TighteningMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Distributional(model) => {
                write!(f, "Distributional(experts {:?})", model.expert_counts())
            }
            Self::RobustTube => write!(f, "RobustTube"),
        }
    }
}

/// Everything computed once before closed-loop operation.
#[derive(Clone, Debug)]
pub struct ControllerState {
    sys: SystemModel,
    cfg: MPCConfig,
    mode: TighteningMode,
    k: DMatrix<f64>,
    p: DMatrix<f64>,
    a_cl: ClosedLoopMatrix,
    mrpi: MrpiApprox,
    x_tight: Polytope,
    u_tight: Polytope,
    terminal: TerminalSet,
    chol_q: DMatrix<f64>,
    chol_r: DMatrix<f64>,
    chol_p: DMatrix<f64>,
}

impl ControllerState {
    pub fn system(&self) -> &SystemModel {
        &self.sys
    }

    pub fn config(&self) -> &MPCConfig {
        &self.cfg
    }

    pub fn mode(&self) -> &TighteningMode {
        &self.mode
    }

    pub fn gain(&self) -> &DMatrix<f64> {
        &self.k
    }

    pub fn terminal_weight(&self) -> &DMatrix<f64> {
        &self.p
    }

    pub fn closed_loop(&self) -> &ClosedLoopMatrix {
        &self.a_cl
    }

    pub fn mrpi(&self) -> &MrpiApprox {
        &self.mrpi
    }

    /// `X ⊖ Z`.
    pub fn state_tight(&self) -> &Polytope {
        &self.x_tight
    }

    /// `U ⊖ K Z`, shrunk by the input back-off.
    pub fn input_tight(&self) -> &Polytope {
        &self.u_tight
    }

    pub fn terminal(&self) -> &TerminalSet {
        &self.terminal
    }

    /// Same sets and gains with a different first-step tightening.
    pub fn with_mode(&self, mode: TighteningMode) -> Self {
        Self {
            mode,
            ..self.clone()
        }
    }

    /// Terminal control law `v = v_e + K (s - s_e)`.
    pub fn terminal_input(&self, s: &DVector<f64>) -> DVector<f64> {
        &self.terminal.anchor_input + &self.k * (s - &self.terminal.anchor_state)
    }
}

/// Computes the feedback gain, invariant sets and terminal set.
pub fn setup_controller(
    sys: SystemModel,
    cfg: MPCConfig,
    mode: TighteningMode,
) -> Result<ControllerState, MpcError> {
    let n = sys.state_dim();
    let m = sys.input_dim();
    cfg.validate(n, m)?;
    if let TighteningMode::Distributional(model) = &mode {
        if model.output_dim() != n || model.data().input_dim() != n {
            return Err(MpcError::Config(format!(
                "disturbance model maps {} inputs to {} outputs, system has {} states",
                model.data().input_dim(),
                model.output_dim(),
                n
            )));
        }
    }

    let (k, p_riccati) = riccati_gain(&sys.a, &sys.b, &cfg.q, &cfg.r)?;
    let p = cfg.terminal_weight.clone().unwrap_or(p_riccati);
    let a_cl = ClosedLoopMatrix::new(&sys.a + &sys.b * &k)?;
    let mrpi = mrpi_zonotope(&a_cl, &sys.disturbance, cfg.mrpi_eps)?;

    let x_tight = pontryagin_diff(&sys.state, &mrpi.polytope)?;
    if x_tight.is_empty() || x_tight.clone().check_empty()?.is_empty() {
        return Err(MpcError::EmptySet("state constraints X ⊖ Z".into()));
    }
    let u_tube = sys.input.pontryagin_diff_mapped(&mrpi.polytope, Some(&k))?;
    let u_tight = Polytope::new(
        u_tube.normals().clone(),
        u_tube.offsets().map(|o| o - cfg.input_backoff),
    )?;
    if u_tube.is_empty() || u_tight.clone().check_empty()?.is_empty() {
        return Err(MpcError::EmptySet("input constraints U ⊖ K Z".into()));
    }

    let terminal = match origin_terminal_set(&a_cl, &k, &x_tight, &u_tight)? {
        Some(t) => t,
        None => {
            let (s_e, v_e) = select_anchor(
                &sys.a,
                &sys.b,
                &x_tight,
                &u_tight,
                &cfg.q,
                &cfg.r,
                cfg.anchor_margin,
            )?;
            terminal_set_about(&a_cl, &k, &x_tight, &u_tight, &s_e, &v_e, TERMINAL_MAX_ITER)?
        }
    };
    if terminal.set.is_empty() {
        return Err(MpcError::EmptySet("terminal set".into()));
    }
    if !terminal.converged {
        return Err(MpcError::Config(format!(
            "terminal set did not converge within {} iterations",
            terminal.iterations
        )));
    }
    log::debug!(
        "controller: K = {k}, mRPI steps {}, terminal set {} facets after {} iterations, anchor {}",
        mrpi.steps,
        terminal.set.num_facets(),
        terminal.iterations,
        terminal.anchor_state
    );

    let chol_q = anchor::cholesky_factor(&cfg.q, "Q")?;
    let chol_r = anchor::cholesky_factor(&cfg.r, "R")?;
    let chol_p = anchor::cholesky_factor(&p, "P")?;
    Ok(ControllerState {
        sys,
        cfg,
        mode,
        k,
        p,
        a_cl,
        mrpi,
        x_tight,
        u_tight,
        terminal,
        chol_q,
        chol_r,
        chol_p,
    })
}

/// Terminal sets with a smaller inscribed ball count as degenerate.
const TERMINAL_INTERIOR_TOL: f64 = 1e-6;

/// Terminal set about the origin when the origin is admissible and the set
/// has interior.
fn origin_terminal_set(
    a_cl: &ClosedLoopMatrix,
    k: &DMatrix<f64>,
    x_tight: &Polytope,
    u_tight: &Polytope,
) -> Result<Option<TerminalSet>, MpcError> {
    let n = a_cl.dim();
    let m = k.nrows();
    if x_tight.violation(&DVector::zeros(n)) > ANCHOR_SNAP_TOL
        || u_tight.violation(&DVector::zeros(m)) > ANCHOR_SNAP_TOL
    {
        return Ok(None);
    }
    let t = terminal_set_about(
        a_cl,
        k,
        x_tight,
        u_tight,
        &DVector::zeros(n),
        &DVector::zeros(m),
        TERMINAL_MAX_ITER,
    )?;
    if t.converged && !t.set.is_empty() && t.set.inner_radius()? > TERMINAL_INTERIOR_TOL {
        Ok(Some(t))
    } else {
        Ok(None)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum StepStatus {
    Optimal,
    Infeasible,
}

/// Result of one receding-horizon optimization.
#[derive(Clone, Debug)]
pub struct StepSolution {
    pub status: StepStatus,
    /// Nominal states `s_0 … s_N`; empty when infeasible.
    pub nominal_states: Vec<DVector<f64>>,
    /// Nominal inputs `v_0 … v_{N-1}`; empty when infeasible.
    pub nominal_inputs: Vec<DVector<f64>>,
    /// Applied input `K (x - s_0) + v_0`; empty when infeasible.
    pub input: DVector<f64>,
    /// First-step offsets; `None` for the robust tube.
    pub offsets: Option<TighteningOffsets>,
    /// Optimal cost `J*` evaluated at the returned trajectory.
    pub objective: f64,
    /// Largest constraint relaxation used; zero unless solved relaxed.
    pub relaxation: f64,
    pub solve_seconds: f64,
}

impl StepSolution {
    pub fn is_optimal(&self) -> bool {
        self.status == StepStatus::Optimal
    }

    pub fn s0(&self) -> &DVector<f64> {
        &self.nominal_states[0]
    }
}

/// First-step offsets at `x`, or `None` for the robust tube.
pub fn first_step_offsets(
    ctrl: &ControllerState,
    x: &DVector<f64>,
) -> Result<Option<TighteningOffsets>, MpcError> {
    match &ctrl.mode {
        TighteningMode::Distributional(model) => {
            let pred = predict_disturbance(model, x.as_slice());
            Ok(Some(build_offsets(&pred, &ctrl.sys.disturbance, ctrl.cfg.risk_level)?))
        }
        TighteningMode::RobustTube => Ok(None),
    }
}

/// Solves the receding-horizon problem at state `x`.
///
/// Infeasibility is reported through the status; solver breakdowns are
/// errors.
pub fn solve_step(ctrl: &ControllerState, x: &DVector<f64>) -> Result<StepSolution, MpcError> {
    solve_program(ctrl, x, false)
}

/// Solves the problem with the state, first-step and terminal constraints
/// relaxed by a shared slack charged at [`RELAXATION_PENALTY`] per unit.
///
/// The tube and input constraints are kept, so `s_0 = x` with any admissible
/// inputs is always feasible and the applied input always satisfies `𝕌`.
/// Meant as a backup when [`solve_step`] reports infeasibility.
pub fn solve_relaxed(ctrl: &ControllerState, x: &DVector<f64>) -> Result<StepSolution, MpcError> {
    solve_program(ctrl, x, true)
}

fn solve_program(ctrl: &ControllerState, x: &DVector<f64>, relaxed: bool) -> Result<StepSolution, MpcError> {
    let start = Instant::now();
    let n = ctrl.sys.state_dim();
    if x.len() != n || !x.iter().all(|v| v.is_finite()) {
        return Err(MpcError::Contract(format!("state must be a finite {n}-vector")));
    }
    let offsets = first_step_offsets(ctrl, x)?;
    let layout = Layout::new(n, ctrl.sys.input_dim(), ctrl.cfg.horizon);
    let program = build_program(ctrl, &layout, x, offsets.as_ref(), relaxed);
    let mut sol = None;
    for retry in 0..TOLERANCE_RETRIES {
        let tol = ctrl.cfg.solver_tol * 10f64.powi(retry);
        let attempt = solve_socp(&program, tol)
            .map_err(|e| MpcError::Contract(format!("malformed program: {e}")))?;
        let stalled = attempt.status == ConicStatus::NumericalFailure;
        sol = Some(attempt);
        if !stalled {
            break;
        }
        log::debug!("solver stalled at tolerance {tol:e}, retrying looser");
    }
    let sol = sol.expect("at least one attempt");
    let elapsed = |s: Instant| s.elapsed().as_secs_f64();
    match sol.status {
        ConicStatus::Optimal => {
            let states: Vec<DVector<f64>> = (0..=layout.horizon)
                .map(|k| layout.state(&sol.x, k))
                .collect();
            let inputs: Vec<DVector<f64>> = (0..layout.horizon)
                .map(|k| layout.input(&sol.x, k))
                .collect();
            let objective = trajectory_cost(ctrl, &states, &inputs);
            let input = control_law_unchecked(x, &states[0], &inputs[0], &ctrl.k);
            let relaxation = if relaxed {
                sol.x[layout.num_decision() + 1].max(0.0)
            } else {
                0.0
            };
            Ok(StepSolution {
                status: StepStatus::Optimal,
                nominal_states: states,
                nominal_inputs: inputs,
                input,
                offsets,
                objective,
                relaxation,
                solve_seconds: elapsed(start),
            })
        }
        ConicStatus::Infeasible => Ok(StepSolution {
            status: StepStatus::Infeasible,
            nominal_states: Vec::new(),
            nominal_inputs: Vec::new(),
            input: DVector::zeros(0),
            offsets,
            objective: f64::INFINITY,
            relaxation: 0.0,
            solve_seconds: elapsed(start),
        }),
        other => Err(MpcError::Solver(other)),
    }
}

/// Applied input `K (x - s_0*) + v_0*` of an optimal solution.
pub fn control_law(
    sol: &StepSolution,
    x: &DVector<f64>,
    k: &DMatrix<f64>,
) -> Result<DVector<f64>, MpcError> {
    if !sol.is_optimal() {
        return Err(MpcError::Contract(
            "control law requested from a non-optimal solution".into(),
        ));
    }
    Ok(control_law_unchecked(x, sol.s0(), &sol.nominal_inputs[0], k))
}

fn control_law_unchecked(
    x: &DVector<f64>,
    s0: &DVector<f64>,
    v0: &DVector<f64>,
    k: &DMatrix<f64>,
) -> DVector<f64> {
    k * (x - s0) + v0
}

/// `Σ_{k<N} ‖s_k‖²_Q + ‖v_k‖²_R + ‖s_N‖²_P`.
pub fn trajectory_cost(
    ctrl: &ControllerState,
    states: &[DVector<f64>],
    inputs: &[DVector<f64>],
) -> f64 {
    let quad = |m: &DMatrix<f64>, z: &DVector<f64>| z.dot(&(m * z));
    let stage: f64 = inputs
        .iter()
        .enumerate()
        .map(|(k, v)| quad(&ctrl.cfg.q, &states[k]) + quad(&ctrl.cfg.r, v))
        .sum();
    stage + quad(&ctrl.p, &states[inputs.len()])
}

/// Candidate for the next step obtained by shifting an optimal solution:
/// `s_0 ← s_1`, inputs `v_1 … v_{N-1}` followed by the terminal law at
/// `s_N`.
pub fn shifted_candidate(
    ctrl: &ControllerState,
    sol: &StepSolution,
) -> Result<(DVector<f64>, Vec<DVector<f64>>), MpcError> {
    if !sol.is_optimal() {
        return Err(MpcError::Contract("cannot shift a non-optimal solution".into()));
    }
    let n_h = sol.nominal_inputs.len();
    let mut inputs: Vec<DVector<f64>> = sol.nominal_inputs[1..].to_vec();
    inputs.push(ctrl.terminal_input(&sol.nominal_states[n_h]));
    Ok((sol.nominal_states[1].clone(), inputs))
}

/// Largest violation of the receding-horizon constraints by the plan
/// `(s_0, v)` at state `x`, with the given first-step offsets.
pub fn plan_violation(
    ctrl: &ControllerState,
    x: &DVector<f64>,
    s0: &DVector<f64>,
    inputs: &[DVector<f64>],
    offsets: Option<&TighteningOffsets>,
) -> f64 {
    let horizon = inputs.len();
    let mut states = vec![s0.clone()];
    for v in inputs {
        let next = &ctrl.sys.a * states.last().expect("nonempty") + &ctrl.sys.b * v;
        states.push(next);
    }
    let mut worst = ctrl.mrpi.polytope.violation(&(x - s0));
    worst = worst.max(first_step_violation(ctrl, x, s0, &states[1], offsets));
    for s in states.iter().take(horizon).skip(2) {
        worst = worst.max(ctrl.x_tight.violation(s));
    }
    for v in inputs {
        worst = worst.max(ctrl.u_tight.violation(v));
    }
    worst.max(ctrl.terminal.set.violation(&states[horizon]))
}

fn first_step_violation(
    ctrl: &ControllerState,
    x: &DVector<f64>,
    s0: &DVector<f64>,
    s1: &DVector<f64>,
    offsets: Option<&TighteningOffsets>,
) -> f64 {
    match offsets {
        None => ctrl.x_tight.violation(s1),
        Some(eta) => {
            let z = s1 + ctrl.a_cl.matrix() * (x - s0);
            let lo = ctrl.sys.state.lower();
            let hi = ctrl.sys.state.upper();
            (0..z.len())
                .map(|t| (z[t] - (hi[t] - eta.upper[t])).max(lo[t] + eta.lower[t] - z[t]))
                .fold(0.0, f64::max)
        }
    }
}

/// Variable layout: `s_0`, then `v_k` for `k < N`, then `s_k` for
/// `1 ≤ k ≤ N`, then the cost epigraph variable.
struct Layout {
    n: usize,
    m: usize,
    horizon: usize,
}

impl Layout {
    fn new(n: usize, m: usize, horizon: usize) -> Self {
        Self { n, m, horizon }
    }

    fn state_index(&self, k: usize, i: usize) -> usize {
        if k == 0 {
            i
        } else {
            self.n + self.horizon * self.m + (k - 1) * self.n + i
        }
    }

    fn input_index(&self, k: usize, j: usize) -> usize {
        self.n + k * self.m + j
    }

    fn num_decision(&self) -> usize {
        self.n * (self.horizon + 1) + self.m * self.horizon
    }

    fn state(&self, x: &[f64], k: usize) -> DVector<f64> {
        DVector::from_iterator(self.n, (0..self.n).map(|i| x[self.state_index(k, i)]))
    }

    fn input(&self, x: &[f64], k: usize) -> DVector<f64> {
        DVector::from_iterator(self.m, (0..self.m).map(|j| x[self.input_index(k, j)]))
    }

    fn states(&self, k: usize) -> Vec<usize> {
        (0..self.n).map(|i| self.state_index(k, i)).collect()
    }

    fn inputs(&self, k: usize) -> Vec<usize> {
        (0..self.m).map(|j| self.input_index(k, j)).collect()
    }
}

/// Facet pairs `h_i + h_j` below this with opposite normals are treated as
/// one equality.
const IMPLICIT_EQUALITY_TOL: f64 = 1e-12;

/// Cost per unit of constraint relaxation in the relaxed problem.
pub const RELAXATION_PENALTY: f64 = 1e4;

/// Attempts per solve; each retry loosens the tolerance tenfold.
/// Optima on heavily degenerate vertices can stall the interior-point
/// iteration at tight tolerances.
const TOLERANCE_RETRIES: i32 = 5;

/// `H z ≤ h` for `z` given by variable indices, with every row loosened by
/// the slack variable when one is given.
///
/// Without slack, opposite facet pairs that pin `z` to a hyperplane become
/// equalities, so a degenerate set such as `𝒵 = {0}` does not remove the
/// strict interior the interior-point method relies on.
fn add_polytope_rows(p: &mut ConicProgram, set: &Polytope, vars: &[usize], slack: Option<usize>) {
    let normals = set.normals();
    let offsets = set.offsets();
    let rows = set.num_facets();
    let mut partner: Vec<Option<usize>> = vec![None; rows];
    if slack.is_none() {
        for i in 0..rows {
            if partner[i].is_some() {
                continue;
            }
            for j in i + 1..rows {
                if partner[j].is_none()
                    && offsets[i] + offsets[j] <= IMPLICIT_EQUALITY_TOL
                    && (normals.row(i) + normals.row(j)).amax() <= IMPLICIT_EQUALITY_TOL
                {
                    partner[i] = Some(j);
                    partner[j] = Some(i);
                    break;
                }
            }
        }
    }
    for r in 0..rows {
        let mut terms: Vec<(usize, f64)> = vars
            .iter()
            .enumerate()
            .filter(|(c, _)| normals[(r, *c)] != 0.0)
            .map(|(c, &v)| (v, normals[(r, c)]))
            .collect();
        if terms.is_empty() {
            continue;
        }
        match partner[r] {
            Some(j) if j > r => {
                p.add_equality(&terms, 0.5 * (offsets[r] - offsets[j]));
            }
            Some(_) => {}
            None => {
                if let Some(sv) = slack {
                    terms.push((sv, -1.0));
                }
                p.add_le(&terms, offsets[r]);
            }
        }
    }
}

/// The receding-horizon program at `x`. With `relaxed`, the state, first-step
/// and terminal constraints share one penalized slack; the tube and input
/// constraints stay hard so the applied input still lies in `𝕌`.
fn build_program(
    ctrl: &ControllerState,
    layout: &Layout,
    x: &DVector<f64>,
    offsets: Option<&TighteningOffsets>,
    relaxed: bool,
) -> ConicProgram {
    let (n, m, horizon) = (layout.n, layout.m, layout.horizon);
    let a = &ctrl.sys.a;
    let b = &ctrl.sys.b;
    let mut p = ConicProgram::new();
    p.add_vars(layout.num_decision());
    let t = p.add_var();
    p.set_cost(t, 1.0);
    let slack = relaxed.then(|| {
        let sv = p.add_nonneg_var();
        p.set_cost(sv, RELAXATION_PENALTY);
        sv
    });

    // Nominal dynamics.
    for k in 0..horizon {
        for i in 0..n {
            let mut terms = vec![(layout.state_index(k + 1, i), 1.0)];
            for j in 0..n {
                if a[(i, j)] != 0.0 {
                    terms.push((layout.state_index(k, j), -a[(i, j)]));
                }
            }
            for j in 0..m {
                if b[(i, j)] != 0.0 {
                    terms.push((layout.input_index(k, j), -b[(i, j)]));
                }
            }
            p.add_equality(&terms, 0.0);
        }
    }

    // x - s_0 ∈ Z, i.e. -H s_0 ≤ h - H x.
    let z = &ctrl.mrpi.polytope;
    let neg_z = Polytope::new(-z.normals(), z.offsets() - z.normals() * x)
        .expect("finite by construction");
    add_polytope_rows(&mut p, &neg_z, &layout.states(0), None);

    // First predicted state.
    match offsets {
        Some(eta) => {
            let a_cl = ctrl.a_cl.matrix();
            let ax = a_cl * x;
            let lo = ctrl.sys.state.lower();
            let hi = ctrl.sys.state.upper();
            for tau in 0..n {
                let mut terms = vec![(layout.state_index(1, tau), 1.0)];
                for j in 0..n {
                    if a_cl[(tau, j)] != 0.0 {
                        terms.push((layout.state_index(0, j), -a_cl[(tau, j)]));
                    }
                }
                let mut upper = terms.clone();
                let mut lower: Vec<(usize, f64)> = terms.iter().map(|&(v, c)| (v, -c)).collect();
                if let Some(sv) = slack {
                    upper.push((sv, -1.0));
                    lower.push((sv, -1.0));
                }
                p.add_le(&upper, hi[tau] - eta.upper[tau] - ax[tau]);
                p.add_le(&lower, -(lo[tau] + eta.lower[tau] - ax[tau]));
            }
        }
        None => add_polytope_rows(&mut p, &ctrl.x_tight, &layout.states(1), slack),
    }

    for k in 2..horizon {
        add_polytope_rows(&mut p, &ctrl.x_tight, &layout.states(k), slack);
    }
    for k in 0..horizon {
        add_polytope_rows(&mut p, &ctrl.u_tight, &layout.inputs(k), None);
    }
    add_polytope_rows(&mut p, &ctrl.terminal.set, &layout.states(horizon), slack);

    // Cost epigraph ‖Lᵀz‖ ≤ t. Minimizing the norm instead of its square has
    // the same minimizer and keeps the interior-point error in z linear in
    // the solver tolerance.
    let head = p.add_affine(&[(t, 1.0)], 0.0);
    let mut legs = Vec::new();
    let mut push_block = |p: &mut ConicProgram, factor: &DMatrix<f64>, vars: &[usize]| {
        let lt = factor.transpose();
        for row in 0..lt.nrows() {
            let terms: Vec<(usize, f64)> = vars
                .iter()
                .enumerate()
                .filter(|(c, _)| lt[(row, *c)] != 0.0)
                .map(|(c, &v)| (v, lt[(row, c)]))
                .collect();
            legs.push(p.add_affine(&terms, 0.0));
        }
    };
    for k in 0..horizon {
        push_block(&mut p, &ctrl.chol_q, &layout.states(k));
        push_block(&mut p, &ctrl.chol_r, &layout.inputs(k));
    }
    push_block(&mut p, &ctrl.chol_p, &layout.states(horizon));
    p.add_soc(head, &legs);
    p
}

#[cfg(test)]
mod tests;
