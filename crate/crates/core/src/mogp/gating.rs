use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::MogpError;

/// Dirichlet-process gating: squared-exponential width `φ` and
/// concentration `α`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GatingParams {
    pub kernel_width: f64,
    pub concentration: f64,
}

impl GatingParams {
    pub fn new(kernel_width: f64, concentration: f64) -> Result<Self, MogpError> {
        let p = Self {
            kernel_width,
            concentration,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), MogpError> {
        let ok = |v: f64| v.is_finite() && v > 0.0;
        if !ok(self.kernel_width) || !ok(self.concentration) {
            return Err(MogpError::InvalidParams(
                "gating width and concentration must be positive".into(),
            ));
        }
        Ok(())
    }

    /// `ln K_φ(a, b) = -‖a - b‖² / (2φ²)`.
    pub fn log_kernel(&self, a: &[f64], b: &[f64]) -> f64 {
        let r2: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
        -r2 / (2.0 * self.kernel_width * self.kernel_width)
    }
}

/// Kernel-weighted occupation counts `ñ_j = n_eff Σ_{i∈j} K / Σ_i K`.
///
/// `log_k[i]` is the log gating kernel between the query and point `i`;
/// entries set to `None` are excluded (the held-out point). Weights are
/// normalized in log space, so remote queries do not underflow.
pub(crate) fn weighted_counts(
    log_k: impl Iterator<Item = Option<f64>> + Clone,
    assignments: &[usize],
    experts: usize,
    n_eff: f64,
) -> Vec<f64> {
    let max = log_k
        .clone()
        .flatten()
        .fold(f64::NEG_INFINITY, f64::max);
    let mut counts = vec![0.0; experts];
    if !max.is_finite() {
        return counts;
    }
    let mut total = 0.0;
    for (lk, &c) in log_k.zip(assignments) {
        if let Some(lk) = lk {
            let w = (lk - max).exp();
            counts[c] += w;
            total += w;
        }
    }
    for v in counts.iter_mut() {
        *v *= n_eff / total;
    }
    counts
}

/// Gating probabilities at a new query before folding the new-expert mass
/// back: `(ñ_j / (n + α) for each expert, α / (n + α))`.
pub fn gating_weights_raw(
    inputs: &DMatrix<f64>,
    assignments: &[usize],
    experts: usize,
    gating: &GatingParams,
    query: &[f64],
) -> (Vec<f64>, f64) {
    let n = assignments.len() as f64;
    let log_k = (0..inputs.nrows()).map(|i| {
        let zi: Vec<f64> = inputs.row(i).iter().copied().collect();
        Some(gating.log_kernel(&zi, query))
    });
    let log_k: Vec<Option<f64>> = log_k.collect();
    let counts = weighted_counts(log_k.iter().copied(), assignments, experts, n);
    let denom = n + gating.concentration;
    (
        counts.iter().map(|c| c / denom).collect(),
        gating.concentration / denom,
    )
}

/// Gating probabilities over existing experts; the new-expert share is
/// redistributed proportionally.
pub fn normalize_existing(raw: &[f64]) -> Vec<f64> {
    let total: f64 = raw.iter().sum();
    if total > 0.0 && total.is_finite() {
        let mut w: Vec<f64> = raw.iter().map(|v| v / total).collect();
        renormalize(&mut w);
        w
    } else {
        // No usable kernel mass: fall back to uniform weights.
        vec![1.0 / raw.len() as f64; raw.len()]
    }
}

/// Rescales so the entries sum to one in floating point as closely as the
/// arithmetic allows.
pub(crate) fn renormalize(w: &mut [f64]) {
    let s: f64 = w.iter().sum();
    for v in w.iter_mut() {
        *v /= s;
    }
}
