//! Moment ambiguity sets built from mixture predictions and the
//! distributionally robust CVaR tightening offsets derived from them.
//!
//! The offset is the optimal value of a second-order cone program. An
//! independent oracle discretizes the primal moment problem into small
//! linear programs and minimizes over the CVaR threshold by golden-section
//! search.

mod simplex;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::conic::{solve_socp, ConicProgram, ConicStatus, DEFAULT_TOLERANCE};
use crate::geometry::BoxSet;
use crate::mogp::{Component, MixturePrediction};

pub use simplex::{maximize as simplex_maximize, LpOutcome};

/// Tolerance on the sum of component weights.
pub const WEIGHT_SUM_TOL: f64 = 1e-12;
/// Default number of support atoms per component in the oracle.
pub const DEFAULT_GRID: usize = 2001;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DrcvarError {
    #[error("invalid ambiguity set: {0}")]
    InvalidSet(String),
    #[error("risk level {0} outside its admissible range")]
    InvalidEps(f64),
    #[error("no samples")]
    NoSamples,
    #[error("conic solver returned {0:?}")]
    Solver(ConicStatus),
    #[error("oracle linear program infeasible for component {0}")]
    OracleInfeasible(usize),
    #[error("dimension mismatch: prediction has {prediction} outputs, support has {support}")]
    DimensionMismatch { prediction: usize, support: usize },
}

/// One local moment set: weight `γ`, mean `μ`, variance bound `Σ` and
/// support interval `[lower, upper]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AmbiguityComponent {
    pub weight: f64,
    pub mean: f64,
    pub variance: f64,
    pub lower: f64,
    pub upper: f64,
}

impl AmbiguityComponent {
    pub fn validate(&self) -> Result<(), DrcvarError> {
        let finite = [self.weight, self.mean, self.variance, self.lower, self.upper]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(DrcvarError::InvalidSet("non-finite component".into()));
        }
        if self.weight < 0.0 || self.variance < 0.0 {
            return Err(DrcvarError::InvalidSet(
                "negative weight or variance".into(),
            ));
        }
        if self.lower > self.upper {
            return Err(DrcvarError::InvalidSet("empty support".into()));
        }
        if self.mean < self.lower || self.mean > self.upper {
            return Err(DrcvarError::InvalidSet(format!(
                "mean {} outside support [{}, {}]",
                self.mean, self.lower, self.upper
            )));
        }
        Ok(())
    }

    fn negated(&self) -> Self {
        Self {
            weight: self.weight,
            mean: -self.mean,
            variance: self.variance,
            lower: -self.upper,
            upper: -self.lower,
        }
    }
}

/// Weighted combination of local moment sets for one disturbance dimension.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AmbiguitySet {
    components: Vec<AmbiguityComponent>,
}

impl AmbiguitySet {
    pub fn new(components: Vec<AmbiguityComponent>) -> Result<Self, DrcvarError> {
        Self::new_unchecked(components).validated()
    }

    /// Skips validation; used to inject deliberately broken sets.
    pub fn new_unchecked(components: Vec<AmbiguityComponent>) -> Self {
        Self { components }
    }

    fn validated(self) -> Result<Self, DrcvarError> {
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<(), DrcvarError> {
        if self.components.is_empty() {
            return Err(DrcvarError::InvalidSet("no components".into()));
        }
        for c in &self.components {
            c.validate()?;
        }
        let total: f64 = self.components.iter().map(|c| c.weight).sum();
        if (total - 1.0).abs() > WEIGHT_SUM_TOL {
            return Err(DrcvarError::InvalidSet(format!(
                "weights sum to {total}"
            )));
        }
        Ok(())
    }

    /// Builds the set for one dimension from predicted components sharing the
    /// support `[lower, upper]`. Means are clamped into the support and
    /// zero-weight components dropped.
    pub fn from_prediction(
        components: &[Component],
        lower: f64,
        upper: f64,
    ) -> Result<Self, DrcvarError> {
        let comps = components
            .iter()
            .filter(|c| c.weight > 0.0)
            .map(|c| AmbiguityComponent {
                weight: c.weight,
                mean: c.mean.clamp(lower, upper),
                variance: c.variance.max(0.0),
                lower,
                upper,
            })
            .collect();
        Self::new(comps)
    }

    pub fn components(&self) -> &[AmbiguityComponent] {
        &self.components
    }

    /// The set of `-w` for `w` in this set.
    pub fn negated(&self) -> Self {
        Self {
            components: self.components.iter().map(AmbiguityComponent::negated).collect(),
        }
    }

    fn support_hull(&self) -> (f64, f64) {
        self.components.iter().fold(
            (f64::INFINITY, f64::NEG_INFINITY),
            |(lo, hi), c| (lo.min(c.lower), hi.max(c.upper)),
        )
    }
}

/// Offsets `η₁` (lower bounds) and `η₂` (upper bounds) per state dimension.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TighteningOffsets {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl TighteningOffsets {
    pub fn zeros(n: usize) -> Self {
        Self {
            lower: vec![0.0; n],
            upper: vec![0.0; n],
        }
    }

    pub fn dim(&self) -> usize {
        self.upper.len()
    }
}

fn check_eps(eps: f64, allow_one: bool) -> Result<(), DrcvarError> {
    let ok = eps > 0.0 && (eps < 1.0 || (allow_one && eps == 1.0));
    if ok {
        Ok(())
    } else {
        Err(DrcvarError::InvalidEps(eps))
    }
}

/// Empirical CVaR at level `eps`: the mean of the worst `eps` fraction of
/// the samples, with the boundary sample weighted fractionally.
pub fn cvar_empirical(samples: &[f64], eps: f64) -> Result<f64, DrcvarError> {
    check_eps(eps, true)?;
    if samples.is_empty() {
        return Err(DrcvarError::NoSamples);
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let n = sorted.len() as f64;
    let mass = eps * n;
    let mut remaining = mass;
    let mut acc = 0.0;
    for &v in &sorted {
        if remaining <= 0.0 {
            break;
        }
        let take = remaining.min(1.0);
        acc += take * v;
        remaining -= take;
    }
    Ok(acc / mass)
}

/// Smallest `η` with `sup_P CVaR_eps(w) ≤ η` over the ambiguity set.
///
/// Per component the worst-case expectation is dualized into a quadratic
/// `t + ωξ + Ωξ²` that must dominate both `0` and `ξ - β - η` on the
/// support; interval nonnegativity of each quadratic is certified by two
/// nonnegative multipliers and one rotated-cone constraint.
pub fn worst_case_cvar_offset(set: &AmbiguitySet, eps: f64) -> Result<f64, DrcvarError> {
    set.validate()?;
    check_eps(eps, false)?;
    let program = cvar_program(set, eps);
    let sol = solve_socp(&program.program, DEFAULT_TOLERANCE)
        .map_err(|_| DrcvarError::Solver(ConicStatus::NumericalFailure))?;
    log::debug!("cvar socp: {:?} eq {:e} cone {:e} it {} eta {}", sol.status, sol.equality_residual, sol.cone_violation, sol.iterations, sol.x.get(program.eta).copied().unwrap_or(f64::NAN));
    match sol.status {
        ConicStatus::Optimal => Ok(sol.value(program.eta)),
        // Valid sets always admit a finite optimum.
        _ => Err(DrcvarError::Solver(ConicStatus::NumericalFailure)),
    }
}

/// Variance below this fraction of the squared support width is treated as
/// zero.
const POINT_MASS_REL: f64 = 1e-12;

fn is_point_mass(c: &AmbiguityComponent) -> bool {
    let width = c.upper - c.lower;
    width == 0.0 || c.variance <= POINT_MASS_REL * width * width
}

struct CvarProgram {
    program: ConicProgram,
    eta: usize,
}

fn cvar_program(set: &AmbiguitySet, eps: f64) -> CvarProgram {
    let mut p = ConicProgram::new();
    let eta = p.add_var();
    let beta = p.add_var();
    p.set_cost(eta, 1.0);

    let mut budget = vec![(beta, eps)];
    for c in set.components() {
        let (a, b) = (c.lower, c.upper);
        if is_point_mass(c) {
            // The set is the single Dirac measure at the mean; the dual
            // quadratic would need unbounded curvature, so use the exact
            // epigraph of (μ - β - η)⁺ instead.
            let t = p.add_nonneg_var();
            p.add_ge(&[(t, 1.0), (beta, 1.0), (eta, 1.0)], c.mean);
            budget.push((t, c.weight));
            continue;
        }
        // Dual quadratic centered at the mean, t + ω z + Ω z² with
        // z = ξ - μ. Each interval certificate `4 Ω c ≥ B²` is posed with the
        // legs rescaled to (σ Ω, c / σ), which leaves the cone unchanged but
        // keeps both legs of order one when σ is small.
        let (a, b) = (a - c.mean, b - c.mean);
        let sd = c.variance.sqrt();
        let k = 1.0 / sd;
        let t = p.add_var();
        let omega = p.add_var();
        let curv = p.add_nonneg_var();
        let phi1 = p.add_nonneg_var();
        let phi2 = p.add_nonneg_var();
        let psi1 = p.add_nonneg_var();
        let psi2 = p.add_nonneg_var();

        budget.push((t, c.weight));
        budget.push((curv, c.weight * sd));

        // Ωz² + ωz + t ≥ 0 on [a, b]
        let lin = p.add_affine(&[(omega, 1.0), (phi1, 1.0), (phi2, -1.0)], 0.0);
        let diff = p.add_affine(&[(curv, 1.0), (t, -k), (phi1, b * k), (phi2, -a * k)], 0.0);
        let sum = p.add_affine(&[(curv, 1.0), (t, k), (phi1, -b * k), (phi2, a * k)], 0.0);
        p.add_soc(sum, &[lin, diff]);

        // Ωz² + ωz + t ≥ z + μ - β - η on [a, b]
        let lin = p.add_affine(&[(omega, 1.0), (psi1, 1.0), (psi2, -1.0)], -1.0);
        let diff = p.add_affine(
            &[
                (curv, 1.0),
                (t, -k),
                (beta, -k),
                (eta, -k),
                (psi1, b * k),
                (psi2, -a * k),
            ],
            c.mean * k,
        );
        let sum = p.add_affine(
            &[
                (curv, 1.0),
                (t, k),
                (beta, k),
                (eta, k),
                (psi1, -b * k),
                (psi2, a * k),
            ],
            -c.mean * k,
        );
        p.add_soc(sum, &[lin, diff]);
    }
    p.add_le(&budget, 0.0);
    CvarProgram { program: p, eta }
}

/// Worst-case CVaR computed from the primal moment problem with each
/// component's support discretized into `grid_points` uniform atoms plus an
/// atom at the mean.
pub fn lp_primal_oracle(
    set: &AmbiguitySet,
    eps: f64,
    grid_points: usize,
) -> Result<f64, DrcvarError> {
    check_eps(eps, false)?;
    if grid_points == 0 {
        return Err(DrcvarError::InvalidSet("empty grid".into()));
    }
    let comps = set.components();
    if comps.is_empty() {
        return Err(DrcvarError::InvalidSet("no components".into()));
    }
    for (j, c) in comps.iter().enumerate() {
        if !(c.mean >= c.lower && c.mean <= c.upper) {
            return Err(DrcvarError::OracleInfeasible(j));
        }
    }
    let atoms: Vec<Vec<f64>> = comps
        .iter()
        .map(|c| atoms_for(c, grid_points))
        .collect();

    let objective = |beta: f64| -> Result<f64, DrcvarError> {
        let mut total = 0.0;
        for (j, c) in comps.iter().enumerate() {
            total += c.weight * worst_expectation(c, &atoms[j], beta).ok_or(DrcvarError::OracleInfeasible(j))?;
        }
        Ok(beta + total / eps)
    };

    // The objective decreases below the support hull and increases above it.
    let (lo, hi) = set.support_hull();
    golden_section(objective, lo, hi)
}

fn atoms_for(c: &AmbiguityComponent, grid_points: usize) -> Vec<f64> {
    let width = c.upper - c.lower;
    let mut atoms = if grid_points == 1 || width == 0.0 {
        vec![0.5 * (c.lower + c.upper)]
    } else {
        let step = width / (grid_points - 1) as f64;
        (0..grid_points)
            .map(|k| if k + 1 == grid_points { c.upper } else { c.lower + step * k as f64 })
            .collect()
    };
    if !atoms.contains(&c.mean) {
        atoms.push(c.mean);
    }
    atoms
}

/// `max Σ p_k (ξ_k - β)⁺` over atom probabilities with the mean fixed and
/// the variance bounded.
fn worst_expectation(c: &AmbiguityComponent, atoms: &[f64], beta: f64) -> Option<f64> {
    let k = atoms.len();
    let mut cost: Vec<f64> = atoms.iter().map(|x| (x - beta).max(0.0)).collect();
    cost.push(0.0);
    let mut ones = vec![1.0; k];
    ones.push(0.0);
    let mut mean_row: Vec<f64> = atoms.iter().map(|x| x - c.mean).collect();
    mean_row.push(0.0);
    let mut var_row: Vec<f64> = atoms.iter().map(|x| (x - c.mean).powi(2)).collect();
    var_row.push(1.0);
    match simplex::maximize(&cost, &[ones, mean_row, var_row], &[1.0, 0.0, c.variance]) {
        LpOutcome::Optimal { value, .. } => Some(value),
        _ => None,
    }
}

fn golden_section<F>(f: F, mut lo: f64, mut hi: f64) -> Result<f64, DrcvarError>
where
    F: Fn(f64) -> Result<f64, DrcvarError>,
{
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let tol = 1e-11 * (1.0 + lo.abs().max(hi.abs()));
    let mut x1 = hi - inv_phi * (hi - lo);
    let mut x2 = lo + inv_phi * (hi - lo);
    let mut f1 = f(x1)?;
    let mut f2 = f(x2)?;
    let mut best = f(lo)?.min(f(hi)?).min(f1).min(f2);
    while hi - lo > tol {
        if f1 <= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - inv_phi * (hi - lo);
            f1 = f(x1)?;
            best = best.min(f1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + inv_phi * (hi - lo);
            f2 = f(x2)?;
            best = best.min(f2);
        }
    }
    Ok(best)
}

/// Offsets for every state dimension and both bound sides, solving the
/// `2n` cone programs concurrently.
pub fn build_offsets(
    pred: &MixturePrediction,
    support: &BoxSet,
    eps: f64,
) -> Result<TighteningOffsets, DrcvarError> {
    let n = pred.output_dim();
    if support.dim() != n {
        return Err(DrcvarError::DimensionMismatch {
            prediction: n,
            support: support.dim(),
        });
    }
    check_eps(eps, false)?;
    let sets = (0..n)
        .map(|tau| {
            AmbiguitySet::from_prediction(&pred.dims[tau], support.lower()[tau], support.upper()[tau])
        })
        .collect::<Result<Vec<_>, _>>()?;
    let values = (0..2 * n)
        .into_par_iter()
        .map(|k| {
            let tau = k / 2;
            if k % 2 == 0 {
                worst_case_cvar_offset(&sets[tau].negated(), eps)
            } else {
                worst_case_cvar_offset(&sets[tau], eps)
            }
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(TighteningOffsets {
        lower: values.iter().step_by(2).copied().collect(),
        upper: values.iter().skip(1).step_by(2).copied().collect(),
    })
}

/// Random valid ambiguity set with up to `max_components` components whose
/// common support lies within `[-1, 1]`.
pub fn random_ambiguity_set<R: Rng>(rng: &mut R, max_components: usize) -> AmbiguitySet {
    let m = rng.gen_range(1..=max_components.max(1));
    let lower = rng.gen_range(-1.0..-0.05);
    let upper = rng.gen_range(0.05..1.0);
    let mut weights: Vec<f64> = (0..m).map(|_| rng.gen_range(0.05..1.0)).collect();
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);
    let fix = 1.0 - weights[1..].iter().sum::<f64>();
    weights[0] = fix;
    let components = weights
        .into_iter()
        .map(|weight| {
            let mean = rng.gen_range(lower..upper);
            let spread = (upper - lower) / 3.0;
            let variance = rng.gen_range(0.0..spread * spread);
            AmbiguityComponent {
                weight,
                mean,
                variance,
                lower,
                upper,
            }
        })
        .collect();
    AmbiguitySet { components }
}

/// Result of comparing the cone-program offset with the oracle on random
/// ambiguity sets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub instances: usize,
    pub max_gap: f64,
    /// Instance with the largest gap: the set, the cone-program value and
    /// the oracle value.
    pub worst: Option<(AmbiguitySet, f64, f64)>,
}

/// Draws `n_instances` sets with [`random_ambiguity_set`] (up to four
/// components) from a ChaCha8 stream seeded with `seed` and compares
/// [`worst_case_cvar_offset`] with [`lp_primal_oracle`] at `grid_points`.
pub fn oracle_check(
    n_instances: usize,
    seed: u64,
    eps: f64,
    grid_points: usize,
) -> Result<OracleReport, DrcvarError> {
    check_eps(eps, false)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sets: Vec<AmbiguitySet> = (0..n_instances).map(|_| random_ambiguity_set(&mut rng, 4)).collect();
    let values = sets
        .par_iter()
        .map(|set| Ok((worst_case_cvar_offset(set, eps)?, lp_primal_oracle(set, eps, grid_points)?)))
        .collect::<Result<Vec<(f64, f64)>, DrcvarError>>()?;
    let mut report = OracleReport { instances: n_instances, max_gap: 0.0, worst: None };
    for (set, (socp, oracle)) in sets.into_iter().zip(values) {
        let gap = relative_gap(socp, oracle);
        if report.worst.is_none() || gap > report.max_gap {
            report.max_gap = gap;
            report.worst = Some((set, socp, oracle));
        }
    }
    Ok(report)
}

/// `|a - b| / max(|b|, 1e-2)`: relative gap with an absolute floor near
/// zero.
pub fn relative_gap(value: f64, reference: f64) -> f64 {
    (value - reference).abs() / reference.abs().max(1e-2)
}
