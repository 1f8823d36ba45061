use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::SimError;
use crate::geometry::BoxSet;
use crate::mogp::Dataset;
use crate::mpc::SystemModel;

/// Draws rejected before a sample is clipped into the support.
pub const REJECTION_CAP: usize = 100;

/// The four terms of the Franke surface at `(x, y)`.
pub fn franke_terms(x: f64, y: f64) -> [f64; 4] {
    let (u, v) = (9.0 * x, 9.0 * y);
    [
        0.75 * (-((u - 2.0).powi(2) + (v - 2.0).powi(2)) / 4.0).exp(),
        0.75 * (-(u + 1.0).powi(2) / 49.0 - (v + 1.0) / 10.0).exp(),
        0.5 * (-((u - 7.0).powi(2) + (v - 3.0).powi(2)) / 4.0).exp(),
        -0.2 * (-(u - 4.0).powi(2) - (v - 7.0).powi(2)).exp(),
    ]
}

pub fn franke(x: f64, y: f64) -> f64 {
    franke_terms(x, y).iter().sum()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DisturbanceKind {
    /// Four modes gated by the Franke bumps over the first two states.
    FrankeMultimodal,
    /// Four modes gated by the Franke bumps over the position plane
    /// `(p_x, p_y)` of a `[p_x, v_x, p_y, v_y]` state.
    QuadrotorWind,
    ZeroDisturbance,
    /// Fixed mode weights that do not depend on the state.
    Custom,
}

/// State-dependent mixture disturbance law.
///
/// At state `x` a mode is drawn with the gating probabilities, and the
/// disturbance is that mode's offset plus independent Gaussian noise with the
/// mode's scale. Draws outside the support are redrawn up to
/// [`REJECTION_CAP`] times and then clipped.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DisturbanceSpec {
    pub kind: DisturbanceKind,
    pub support_lower: Vec<f64>,
    pub support_upper: Vec<f64>,
    /// Box mapped onto the unit square for the Franke gating; the state box
    /// in the case studies.
    pub region_lower: Vec<f64>,
    pub region_upper: Vec<f64>,
    pub mode_offsets: Vec<Vec<f64>>,
    pub noise_scales: Vec<f64>,
    /// Softmax inverse temperature applied to the bump magnitudes.
    pub sharpness: f64,
    /// Mode weights of the `Custom` kind.
    #[serde(default)]
    pub custom_weights: Vec<f64>,
}

impl DisturbanceSpec {
    pub fn zero(dim: usize) -> Self {
        Self {
            kind: DisturbanceKind::ZeroDisturbance,
            support_lower: vec![0.0; dim],
            support_upper: vec![0.0; dim],
            region_lower: vec![0.0; dim],
            region_upper: vec![1.0; dim],
            mode_offsets: Vec::new(),
            noise_scales: Vec::new(),
            sharpness: 0.0,
            custom_weights: Vec::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.support_lower.len()
    }

    pub fn mode_count(&self) -> usize {
        match self.kind {
            DisturbanceKind::ZeroDisturbance => 1,
            _ => self.mode_offsets.len(),
        }
    }

    pub fn support(&self) -> Result<BoxSet, SimError> {
        BoxSet::from_slices(&self.support_lower, &self.support_upper)
            .map_err(|e| SimError::Config(format!("disturbance support: {e}")))
    }

    /// State coordinates that drive the gating.
    pub fn gating_axes(&self) -> Option<(usize, usize)> {
        match self.kind {
            DisturbanceKind::FrankeMultimodal => Some((0, 1)),
            DisturbanceKind::QuadrotorWind => Some((0, 2)),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let n = self.dim();
        let bad = |msg: String| Err(SimError::Config(msg));
        if n == 0 || self.support_upper.len() != n {
            return bad("disturbance support must have matching nonempty bounds".into());
        }
        let support = self.support()?;
        if support.is_empty() {
            return bad("disturbance support is empty".into());
        }
        if self.region_lower.len() != n || self.region_upper.len() != n {
            return bad("gating region must match the state dimension".into());
        }
        if let Some((i, j)) = self.gating_axes() {
            let min_dim = if self.kind == DisturbanceKind::QuadrotorWind { 4 } else { 2 };
            if n < min_dim {
                return bad(format!("{:?} needs at least {min_dim} dimensions", self.kind));
            }
            for a in [i, j] {
                if !(self.region_upper[a] > self.region_lower[a]) {
                    return bad(format!("gating region is degenerate along axis {a}"));
                }
            }
            if self.mode_offsets.len() != 4 {
                return bad("Franke gating needs exactly four modes".into());
            }
        }
        if self.kind == DisturbanceKind::ZeroDisturbance {
            return Ok(());
        }
        let modes = self.mode_offsets.len();
        if modes == 0 || self.noise_scales.len() != modes {
            return bad("each mode needs an offset and a noise scale".into());
        }
        for (k, offset) in self.mode_offsets.iter().enumerate() {
            if offset.len() != n {
                return bad(format!("mode {k} offset has dimension {}", offset.len()));
            }
            if !support.contains(&DVector::from_column_slice(offset), 0.0) {
                return bad(format!("mode {k} offset lies outside the support"));
            }
        }
        if !self.noise_scales.iter().all(|s| s.is_finite() && *s >= 0.0) {
            return bad("noise scales must be finite and nonnegative".into());
        }
        if !(self.sharpness.is_finite() && self.sharpness >= 0.0) {
            return bad("gating sharpness must be finite and nonnegative".into());
        }
        if self.kind == DisturbanceKind::Custom {
            let total: f64 = self.custom_weights.iter().sum();
            if self.custom_weights.len() != modes
                || self.custom_weights.iter().any(|w| !(w.is_finite() && *w >= 0.0))
                || !(total > 0.0)
            {
                return bad("custom weights must be nonnegative, one per mode, not all zero".into());
            }
        }
        Ok(())
    }

    /// Probability of each mode at state `x`.
    pub fn mode_probabilities(&self, x: &DVector<f64>) -> Vec<f64> {
        match self.kind {
            DisturbanceKind::ZeroDisturbance => vec![1.0],
            DisturbanceKind::Custom => {
                let total: f64 = self.custom_weights.iter().sum();
                self.custom_weights.iter().map(|w| w / total).collect()
            }
            DisturbanceKind::FrankeMultimodal | DisturbanceKind::QuadrotorWind => {
                let (i, j) = self.gating_axes().expect("Franke kinds have gating axes");
                let unit = |a: usize| {
                    ((x[a] - self.region_lower[a]) / (self.region_upper[a] - self.region_lower[a]))
                        .clamp(0.0, 1.0)
                };
                let scores = franke_terms(unit(i), unit(j)).map(|t| self.sharpness * t.abs());
                let top = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = scores.iter().map(|s| (s - top).exp()).collect();
                let total: f64 = exps.iter().sum();
                exps.iter().map(|e| e / total).collect()
            }
        }
    }

    /// Draws the mode index at `x`.
    pub fn sample_mode<R: Rng + ?Sized>(&self, x: &DVector<f64>, rng: &mut R) -> usize {
        let probs = self.mode_probabilities(x);
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for (k, p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return k;
            }
        }
        probs.len() - 1
    }
}

/// One disturbance realization at state `x`; always inside the support.
pub fn sample_disturbance<R: Rng + ?Sized>(
    spec: &DisturbanceSpec,
    x: &DVector<f64>,
    rng: &mut R,
) -> DVector<f64> {
    let n = spec.dim();
    if spec.kind == DisturbanceKind::ZeroDisturbance {
        return DVector::zeros(n);
    }
    let lo = &spec.support_lower;
    let hi = &spec.support_upper;
    let mode = spec.sample_mode(x, rng);
    let offset = &spec.mode_offsets[mode];
    let scale = spec.noise_scales[mode];
    let mut w = DVector::from_column_slice(offset);
    for _ in 0..REJECTION_CAP {
        for (t, wt) in w.iter_mut().enumerate() {
            let z: f64 = rng.sample(StandardNormal);
            *wt = offset[t] + scale * z;
        }
        if (0..n).all(|t| w[t] >= lo[t] && w[t] <= hi[t]) {
            return w;
        }
    }
    for t in 0..n {
        w[t] = w[t].clamp(lo[t], hi[t]);
    }
    assert!((0..n).all(|t| w[t] >= lo[t] && w[t] <= hi[t]), "sampled disturbance left the support");
    w
}

/// States drawn uniformly over the state box, each paired with one
/// disturbance realization. Deterministic per seed.
pub fn collect_training_data(
    sys: &SystemModel,
    spec: &DisturbanceSpec,
    n_points: usize,
    seed: u64,
) -> Result<Dataset, SimError> {
    if n_points < 10 {
        return Err(SimError::Config(format!("need at least 10 training points, got {n_points}")));
    }
    spec.validate()?;
    let n = sys.state_dim();
    if spec.dim() != n {
        return Err(SimError::Config(format!(
            "disturbance has dimension {}, state has {n}",
            spec.dim()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (lo, hi) = (sys.state.lower(), sys.state.upper());
    let mut inputs = DMatrix::zeros(n_points, n);
    let mut outputs = DMatrix::zeros(n_points, n);
    for i in 0..n_points {
        let x = DVector::from_fn(n, |t, _| lo[t] + (hi[t] - lo[t]) * rng.gen::<f64>());
        let w = sample_disturbance(spec, &x, &mut rng);
        inputs.row_mut(i).copy_from(&x.transpose());
        outputs.row_mut(i).copy_from(&w.transpose());
    }
    Ok(Dataset::new(inputs, outputs, spec.support()?)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BoxSet;
    use proptest::prelude::*;

    fn franke_spec() -> DisturbanceSpec {
        DisturbanceSpec {
            kind: DisturbanceKind::FrankeMultimodal,
            support_lower: vec![-0.8, -0.8],
            support_upper: vec![0.8, 0.8],
            region_lower: vec![-7.0, -3.0],
            region_upper: vec![0.0, 2.0],
            mode_offsets: vec![
                vec![0.5, 0.2],
                vec![-0.5, -0.2],
                vec![0.2, -0.5],
                vec![-0.2, 0.5],
            ],
            noise_scales: vec![0.05, 0.1, 0.05, 0.3],
            sharpness: 4.0,
            custom_weights: Vec::new(),
        }
    }

    fn system() -> SystemModel {
        SystemModel::new(
            DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 1.0]),
            DMatrix::from_row_slice(2, 1, &[0.5, 1.0]),
            BoxSet::from_slices(&[-7.0, -3.0], &[0.0, 2.0]).unwrap(),
            BoxSet::symmetric(1, 5.0).unwrap().to_polytope(),
            BoxSet::symmetric(2, 0.8).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn franke_reference_values() {
        assert!((franke(0.0, 0.0) - 0.7664205912849231).abs() < 1e-12);
        assert_eq!(franke_terms(4.0 / 9.0, 7.0 / 9.0)[3], -0.2);
    }

    #[test]
    fn franke_interior_extrema_by_grid_search() {
        // Two bumps peak inside the square, the second peaks outside it at
        // (-1/9, ·), and the negative term makes one interior dip.
        let n = 201;
        let g = |i: usize| i as f64 / (n - 1) as f64;
        let (mut maxima, mut minima) = (Vec::new(), Vec::new());
        for i in 1..n - 1 {
            for j in 1..n - 1 {
                let f = franke(g(i), g(j));
                let neighbours: Vec<f64> = (i - 1..=i + 1)
                    .flat_map(|a| (j - 1..=j + 1).map(move |b| (a, b)))
                    .filter(|&(a, b)| (a, b) != (i, j))
                    .map(|(a, b)| franke(g(a), g(b)))
                    .collect();
                if neighbours.iter().all(|&v| f > v) {
                    maxima.push((g(i), g(j)));
                }
                if neighbours.iter().all(|&v| f < v) {
                    minima.push((g(i), g(j)));
                }
            }
        }
        assert_eq!(maxima.len(), 2, "{maxima:?}");
        assert_eq!(minima.len(), 1, "{minima:?}");
        let (x, y) = minima[0];
        assert!((x - 4.0 / 9.0).abs() < 0.02 && (y - 7.0 / 9.0).abs() < 0.02);
    }

    #[test]
    fn zero_kind_is_always_zero() {
        let spec = DisturbanceSpec::zero(3);
        spec.validate().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..10 {
            assert_eq!(sample_disturbance(&spec, &DVector::from_element(3, 2.0), &mut rng), DVector::zeros(3));
        }
    }

    #[test]
    fn degenerate_modes_give_zero() {
        let mut spec = franke_spec();
        spec.mode_offsets = vec![vec![0.0, 0.0]; 4];
        spec.noise_scales = vec![0.0; 4];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for k in 0..20 {
            let x = DVector::from_vec(vec![-7.0 + 0.3 * k as f64, -1.0]);
            assert_eq!(sample_disturbance(&spec, &x, &mut rng), DVector::zeros(2));
        }
    }

    #[test]
    fn mode_frequencies_match_gating() {
        // Pearson χ² with 3 degrees of freedom; 16.27 is the 0.999 quantile.
        let spec = franke_spec();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for x in [vec![-5.0, -2.0], vec![-1.0, 1.5], vec![-3.5, 0.0]] {
            let x = DVector::from_vec(x);
            let probs = spec.mode_probabilities(&x);
            let draws = 100_000;
            let mut counts = [0usize; 4];
            for _ in 0..draws {
                counts[spec.sample_mode(&x, &mut rng)] += 1;
            }
            let chi2: f64 = counts
                .iter()
                .zip(&probs)
                .map(|(&c, &p)| {
                    let e = p * draws as f64;
                    (c as f64 - e).powi(2) / e
                })
                .sum();
            assert!(chi2 < 16.27, "χ² = {chi2} at {x}");
        }
    }

    #[test]
    fn custom_weights_ignore_state() {
        let mut spec = franke_spec();
        spec.kind = DisturbanceKind::Custom;
        spec.custom_weights = vec![1.0, 1.0, 2.0, 0.0];
        spec.validate().unwrap();
        let p = spec.mode_probabilities(&DVector::from_vec(vec![-2.0, 1.0]));
        assert_eq!(p, vec![0.25, 0.25, 0.5, 0.0]);
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut spec = franke_spec();
        spec.mode_offsets[0] = vec![2.0, 0.0];
        assert!(spec.validate().is_err());
        let mut spec = franke_spec();
        spec.noise_scales.pop();
        assert!(spec.validate().is_err());
        let mut spec = franke_spec();
        spec.mode_offsets.pop();
        spec.noise_scales.pop();
        assert!(spec.validate().is_err());
    }

    #[test]
    fn training_data_shape_and_determinism() {
        let sys = system();
        let spec = franke_spec();
        let a = collect_training_data(&sys, &spec, 100, 5).unwrap();
        let b = collect_training_data(&sys, &spec, 100, 5).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 100);
        let support = spec.support().unwrap();
        for i in 0..a.len() {
            assert!(support.contains(&a.outputs().row(i).transpose(), 0.0));
            assert!(sys.state.contains(&a.inputs().row(i).transpose(), 0.0));
        }
        let zero = collect_training_data(&sys, &DisturbanceSpec::zero(2), 20, 5).unwrap();
        assert!(zero.outputs().iter().all(|&v| v == 0.0));
        assert!(collect_training_data(&sys, &spec, 9, 5).is_err());
    }

    proptest! {
        #[test]
        fn samples_stay_in_support(
            seed in any::<u64>(),
            x0 in -10.0f64..3.0,
            x1 in -5.0f64..4.0,
            noise in 0.0f64..2.0,
        ) {
            let mut spec = franke_spec();
            spec.noise_scales = vec![noise; 4];
            let support = spec.support().unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = DVector::from_vec(vec![x0, x1]);
            for _ in 0..20 {
                prop_assert!(support.contains(&sample_disturbance(&spec, &x, &mut rng), 0.0));
            }
        }

        #[test]
        fn gating_is_a_distribution(x0 in -10.0f64..3.0, x1 in -5.0f64..4.0, sharp in 0.0f64..50.0) {
            let mut spec = franke_spec();
            spec.sharpness = sharp;
            let p = spec.mode_probabilities(&DVector::from_vec(vec![x0, x1]));
            prop_assert_eq!(p.len(), 4);
            prop_assert!(p.iter().all(|v| *v >= 0.0));
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
