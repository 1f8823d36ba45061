use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use super::MogpError;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Squared-exponential kernel hyperparameters with one lengthscale per
/// input dimension, plus the observation-noise variance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelParams {
    pub lengthscales: Vec<f64>,
    pub signal_variance: f64,
    pub noise_variance: f64,
}

impl KernelParams {
    pub fn new(
        lengthscales: Vec<f64>,
        signal_variance: f64,
        noise_variance: f64,
    ) -> Result<Self, MogpError> {
        let p = Self {
            lengthscales,
            signal_variance,
            noise_variance,
        };
        p.validate()?;
        Ok(p)
    }

    /// Same lengthscale in every input dimension.
    pub fn isotropic(
        dim: usize,
        lengthscale: f64,
        signal_variance: f64,
        noise_variance: f64,
    ) -> Result<Self, MogpError> {
        Self::new(vec![lengthscale; dim], signal_variance, noise_variance)
    }

    pub fn validate(&self) -> Result<(), MogpError> {
        let ok = |v: f64| v.is_finite() && v > 0.0;
        if self.lengthscales.is_empty() || !self.lengthscales.iter().all(|&l| ok(l)) {
            return Err(MogpError::InvalidParams(
                "lengthscales must be positive".into(),
            ));
        }
        if !ok(self.signal_variance) {
            return Err(MogpError::InvalidParams(
                "signal variance must be positive".into(),
            ));
        }
        // Zero noise is allowed for exact interpolation; training enforces a floor.
        if !(self.noise_variance.is_finite() && self.noise_variance >= 0.0) {
            return Err(MogpError::InvalidParams(
                "noise variance must be nonnegative".into(),
            ));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.lengthscales.len()
    }

    /// `k(a, b) = s² exp(-½ Σ_d ((a_d - b_d) / ℓ_d)²)`.
    pub fn kernel(&self, a: &[f64], b: &[f64]) -> f64 {
        let r2: f64 = a
            .iter()
            .zip(b)
            .zip(&self.lengthscales)
            .map(|((x, y), l)| ((x - y) / l).powi(2))
            .sum();
        self.signal_variance * (-0.5 * r2).exp()
    }

    fn to_log(&self) -> DVector<f64> {
        let mut v: Vec<f64> = self.lengthscales.iter().map(|l| l.ln()).collect();
        v.push(self.signal_variance.ln());
        v.push(self.noise_variance.ln());
        DVector::from_vec(v)
    }

    fn from_log(theta: &DVector<f64>) -> Self {
        let d = theta.len() - 2;
        Self {
            lengthscales: (0..d).map(|i| theta[i].exp()).collect(),
            signal_variance: theta[d].exp(),
            noise_variance: theta[d + 1].exp(),
        }
    }
}

/// Point `i` of a point matrix stored one point per column.
pub(crate) fn point(pts: &DMatrix<f64>, i: usize) -> &[f64] {
    let d = pts.nrows();
    &pts.as_slice()[i * d..(i + 1) * d]
}

/// Gram matrix `K + σ² I` over the listed rows.
pub(crate) fn gram(pts: &DMatrix<f64>, idx: &[usize], params: &KernelParams) -> DMatrix<f64> {
    let rows: Vec<&[f64]> = idx.iter().map(|&i| point(pts, i)).collect();
    let n = idx.len();
    let mut k = DMatrix::zeros(n, n);
    for a in 0..n {
        for b in 0..=a {
            let v = params.kernel(rows[a], rows[b]);
            k[(a, b)] = v;
            k[(b, a)] = v;
        }
        k[(a, a)] += params.noise_variance;
    }
    k
}

/// Exact GP posterior `(mean, latent variance)` at `query` for a zero-mean
/// GP with squared-exponential kernel, conditioned on noisy observations.
pub fn gp_posterior(
    train_inputs: &DMatrix<f64>,
    train_outputs: &DVector<f64>,
    params: &KernelParams,
    query: &[f64],
) -> Result<(f64, f64), MogpError> {
    params.validate()?;
    if train_inputs.nrows() != train_outputs.len() {
        return Err(MogpError::Shape(format!(
            "{} inputs but {} outputs",
            train_inputs.nrows(),
            train_outputs.len()
        )));
    }
    if train_inputs.nrows() > 0 && train_inputs.ncols() != query.len() {
        return Err(MogpError::Shape(format!(
            "query has dimension {}, training inputs {}",
            query.len(),
            train_inputs.ncols()
        )));
    }
    let idx: Vec<usize> = (0..train_inputs.nrows()).collect();
    let pts = train_inputs.transpose();
    let cache = GpCache::build(&pts, train_outputs, &idx, params)?;
    Ok(cache.predict(&pts, params, query))
}

/// Cholesky factor and weight vector of one expert's training subset.
#[derive(Clone, Debug)]
pub(crate) struct GpCache {
    pub members: Vec<usize>,
    chol: Option<Cholesky<f64, Dyn>>,
    alpha: DVector<f64>,
}

impl GpCache {
    pub fn build(
        pts: &DMatrix<f64>,
        outputs: &DVector<f64>,
        members: &[usize],
        params: &KernelParams,
    ) -> Result<Self, MogpError> {
        let mut c = Self {
            members: members.to_vec(),
            chol: None,
            alpha: DVector::zeros(0),
        };
        c.refactor(pts, outputs, params)?;
        Ok(c)
    }

    fn refactor(
        &mut self,
        pts: &DMatrix<f64>,
        outputs: &DVector<f64>,
        params: &KernelParams,
    ) -> Result<(), MogpError> {
        if self.members.is_empty() {
            self.chol = None;
            self.alpha = DVector::zeros(0);
            return Ok(());
        }
        let k = gram(pts, &self.members, params);
        let chol = Cholesky::new(k).ok_or(MogpError::IllConditioned)?;
        self.chol = Some(chol);
        self.refresh_alpha(outputs);
        Ok(())
    }

    fn refresh_alpha(&mut self, outputs: &DVector<f64>) {
        let y = DVector::from_iterator(
            self.members.len(),
            self.members.iter().map(|&i| outputs[i]),
        );
        self.alpha = match &self.chol {
            Some(c) => c.solve(&y),
            None => DVector::zeros(0),
        };
    }

    fn factor_ok(&self) -> bool {
        self.chol
            .as_ref()
            .map_or(true, |c| c.l_dirty().iter().all(|v| v.is_finite()))
    }

    /// Appends a training point, updating the factor in `O(n²)`.
    pub fn push(
        &mut self,
        pts: &DMatrix<f64>,
        outputs: &DVector<f64>,
        i: usize,
        params: &KernelParams,
    ) -> Result<(), MogpError> {
        let zi = point(pts, i);
        let mut col = DVector::zeros(self.members.len() + 1);
        for (a, &m) in self.members.iter().enumerate() {
            col[a] = params.kernel(point(pts, m), zi);
        }
        col[self.members.len()] = params.kernel(zi, zi) + params.noise_variance;
        let pos = self.members.len();
        self.members.push(i);
        match &self.chol {
            Some(c) => {
                self.chol = Some(c.insert_column(pos, col));
                if !self.factor_ok() {
                    return self.refactor(pts, outputs, params);
                }
                self.refresh_alpha(outputs);
                Ok(())
            }
            None => self.refactor(pts, outputs, params),
        }
    }

    /// Removes a training point, updating the factor in `O(n²)`.
    pub fn remove(
        &mut self,
        pts: &DMatrix<f64>,
        outputs: &DVector<f64>,
        i: usize,
        params: &KernelParams,
    ) -> Result<(), MogpError> {
        let pos = self
            .members
            .iter()
            .position(|&m| m == i)
            .expect("point belongs to this expert");
        self.members.remove(pos);
        if self.members.is_empty() {
            self.chol = None;
            self.alpha = DVector::zeros(0);
            return Ok(());
        }
        let updated = self.chol.as_ref().map(|c| c.remove_column(pos));
        self.chol = updated;
        if !self.factor_ok() {
            return self.refactor(pts, outputs, params);
        }
        self.refresh_alpha(outputs);
        Ok(())
    }

    /// Posterior mean and latent variance at `query`.
    pub fn predict(&self, pts: &DMatrix<f64>, params: &KernelParams, query: &[f64]) -> (f64, f64) {
        let prior = params.kernel(query, query);
        let Some(chol) = &self.chol else {
            return (0.0, prior);
        };
        let kstar = DVector::from_iterator(
            self.members.len(),
            self.members.iter().map(|&m| params.kernel(point(pts, m), query)),
        );
        let mean = kstar.dot(&self.alpha);
        let mut v = kstar;
        chol.l_dirty()
            .solve_lower_triangular_mut(&mut v);
        let var = (prior - v.norm_squared()).max(0.0);
        (mean, var)
    }

    /// Log predictive density of a fresh observation `y` at `query`.
    pub fn log_predictive(
        &self,
        pts: &DMatrix<f64>,
        params: &KernelParams,
        query: &[f64],
        y: f64,
    ) -> f64 {
        let (mean, var) = self.predict(pts, params, query);
        log_normal(y, mean, var + params.noise_variance)
    }

    /// Log predictive density of member `i`'s own output given the other
    /// members, from the full factor: mean `y_i - α_i / [K⁻¹]_ii`, variance
    /// `1 / [K⁻¹]_ii`.
    pub fn loo_log_predictive(&self, i: usize, y: f64) -> Option<f64> {
        let chol = self.chol.as_ref()?;
        let pos = self.members.iter().position(|&m| m == i)?;
        let n = self.members.len();
        let mut e = DVector::zeros(n);
        e[pos] = 1.0;
        chol.l_dirty().solve_lower_triangular_mut(&mut e);
        let kinv_ii = e.norm_squared();
        if !(kinv_ii > 0.0 && kinv_ii.is_finite()) {
            return None;
        }
        Some(log_normal(y, y - self.alpha[pos] / kinv_ii, 1.0 / kinv_ii))
    }

    /// Log marginal likelihood of the member outputs.
    pub fn log_marginal(&self, outputs: &DVector<f64>) -> f64 {
        let Some(chol) = &self.chol else {
            return 0.0;
        };
        let n = self.members.len() as f64;
        let fit: f64 = self
            .members
            .iter()
            .zip(self.alpha.iter())
            .map(|(&m, a)| outputs[m] * a)
            .sum();
        let logdet = 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        -0.5 * fit - 0.5 * logdet - 0.5 * n * LN_2PI
    }
}

/// Log density of `y` at `z` under the GP prior (no conditioning data).
pub(crate) fn gp_posterior_log_prior(params: &KernelParams, z: &[f64], y: f64) -> f64 {
    log_normal(y, 0.0, params.kernel(z, z) + params.noise_variance)
}

pub(crate) fn log_normal(y: f64, mean: f64, var: f64) -> f64 {
    let var = var.max(1e-300);
    -0.5 * ((y - mean).powi(2) / var + var.ln() + LN_2PI)
}

/// Log marginal likelihood and its gradient with respect to
/// `(ln ℓ_1, …, ln ℓ_d, ln s², ln σ²)`.
pub(crate) fn log_marginal_and_grad(
    pts: &DMatrix<f64>,
    outputs: &DVector<f64>,
    idx: &[usize],
    params: &KernelParams,
) -> Option<(f64, DVector<f64>)> {
    let n = idx.len();
    let d = params.input_dim();
    let rows: Vec<&[f64]> = idx.iter().map(|&i| point(pts, i)).collect();
    let mut kse = DMatrix::zeros(n, n);
    for a in 0..n {
        for b in 0..=a {
            let v = params.kernel(rows[a], rows[b]);
            kse[(a, b)] = v;
            kse[(b, a)] = v;
        }
    }
    let mut k = kse.clone();
    for a in 0..n {
        k[(a, a)] += params.noise_variance;
    }
    let chol = Cholesky::new(k)?;
    let y = DVector::from_iterator(n, idx.iter().map(|&i| outputs[i]));
    let alpha = chol.solve(&y);
    let logdet = 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let lml = -0.5 * y.dot(&alpha) - 0.5 * logdet - 0.5 * n as f64 * LN_2PI;
    if !lml.is_finite() {
        return None;
    }
    let w = &alpha * alpha.transpose() - chol.inverse();
    let mut grad = DVector::zeros(d + 2);
    for a in 0..n {
        for b in 0..n {
            let wk = w[(a, b)] * kse[(a, b)];
            for (l, len) in params.lengthscales.iter().enumerate() {
                grad[l] += wk * ((rows[a][l] - rows[b][l]) / len).powi(2);
            }
            grad[d] += wk;
        }
        grad[d + 1] += w[(a, a)] * params.noise_variance;
    }
    grad *= 0.5;
    Some((lml, grad))
}

/// Box constraints on log-hyperparameters during fitting.
#[derive(Clone, Copy, Debug)]
pub(crate) struct FitBounds {
    pub noise_floor: f64,
}

/// Gradient ascent on the log marginal likelihood in log-parameter space
/// with backtracking line search. Returns the input unchanged when the
/// subset is too small or the objective cannot be evaluated.
pub(crate) fn fit_hyperparams(
    pts: &DMatrix<f64>,
    outputs: &DVector<f64>,
    idx: &[usize],
    start: &KernelParams,
    steps: usize,
    bounds: FitBounds,
) -> KernelParams {
    let clamp = |theta: &mut DVector<f64>| {
        let d = theta.len() - 2;
        for i in 0..d {
            theta[i] = theta[i].clamp(-7.0, 7.0);
        }
        theta[d] = theta[d].clamp(-14.0, 7.0);
        theta[d + 1] = theta[d + 1].clamp(bounds.noise_floor.ln(), 5.0);
    };
    let mut theta = start.to_log();
    clamp(&mut theta);
    let Some((mut best, mut grad)) =
        log_marginal_and_grad(pts, outputs, idx, &KernelParams::from_log(&theta))
    else {
        return start.clone();
    };
    let mut step = 0.5;
    for _ in 0..steps {
        let gnorm = grad.norm();
        if !(gnorm > 1e-9) {
            break;
        }
        let dir = &grad / gnorm;
        let mut accepted = false;
        let mut converged = false;
        for _ in 0..30 {
            let mut cand = &theta + &dir * step;
            clamp(&mut cand);
            if let Some((val, g)) =
                log_marginal_and_grad(pts, outputs, idx, &KernelParams::from_log(&cand))
            {
                if val > best {
                    converged = val - best < 1e-8 * (1.0 + best.abs());
                    theta = cand;
                    best = val;
                    grad = g;
                    accepted = true;
                    break;
                }
            }
            step *= 0.5;
        }
        if !accepted || converged {
            break;
        }
        step = (step * 2.0).min(2.0);
    }
    KernelParams::from_log(&theta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn unit() -> KernelParams {
        KernelParams::new(vec![1.0], 1.0, 0.0).unwrap()
    }

    #[test]
    fn empty_conditioning_gives_prior() {
        let (m, v) = gp_posterior(
            &DMatrix::zeros(0, 1),
            &DVector::zeros(0),
            &KernelParams::new(vec![1.0], 2.5, 0.1).unwrap(),
            &[0.3],
        )
        .unwrap();
        assert_eq!((m, v), (0.0, 2.5));
    }

    #[test]
    fn noiseless_interpolation() {
        let (m, v) = gp_posterior(
            &DMatrix::zeros(1, 1),
            &DVector::from_element(1, 1.0),
            &unit(),
            &[0.0],
        )
        .unwrap();
        assert!((m - 1.0).abs() < 1e-15 && v.abs() < 1e-15);
    }

    #[test]
    fn unit_noise_halves() {
        let mut p = unit();
        p.noise_variance = 1.0;
        let (m, v) = gp_posterior(&DMatrix::zeros(1, 1), &DVector::from_element(1, 1.0), &p, &[0.0]).unwrap();
        assert!((m - 0.5).abs() < 1e-15 && (v - 0.5).abs() < 1e-15);
    }

    #[test]
    fn duplicate_noiseless_inputs_are_ill_conditioned() {
        let err = gp_posterior(
            &DMatrix::zeros(2, 1),
            &DVector::from_vec(vec![1.0, 2.0]),
            &unit(),
            &[0.0],
        )
        .unwrap_err();
        assert_eq!(err, MogpError::IllConditioned);
    }

    #[test]
    fn gradient_matches_finite_difference() {
        let x = DMatrix::from_row_slice(6, 2, &[0.0, 0.1, 0.5, -0.3, 1.0, 0.7, 1.5, 0.2, -0.4, 0.9, 0.8, -1.0]).transpose();
        let y = DVector::from_vec(vec![0.2, -0.1, 0.5, 0.3, -0.4, 0.05]);
        let idx: Vec<usize> = (0..6).collect();
        let p = KernelParams::new(vec![0.7, 1.3], 0.8, 0.05).unwrap();
        let (_, g) = log_marginal_and_grad(&x, &y, &idx, &p).unwrap();
        let theta = p.to_log();
        for i in 0..theta.len() {
            let h = 1e-6;
            let mut up = theta.clone();
            up[i] += h;
            let mut dn = theta.clone();
            dn[i] -= h;
            let fu = log_marginal_and_grad(&x, &y, &idx, &KernelParams::from_log(&up)).unwrap().0;
            let fd = log_marginal_and_grad(&x, &y, &idx, &KernelParams::from_log(&dn)).unwrap().0;
            let num = (fu - fd) / (2.0 * h);
            assert!((num - g[i]).abs() < 1e-5 * (1.0 + num.abs()), "component {i}: {num} vs {}", g[i]);
        }
    }

    #[test]
    fn fitting_does_not_lower_likelihood() {
        let x = DMatrix::from_fn(1, 20, |_, i| i as f64 * 0.3);
        let y = DVector::from_fn(20, |i, _| (i as f64 * 0.3).sin());
        let idx: Vec<usize> = (0..20).collect();
        let start = KernelParams::new(vec![1.0], 1.0, 0.1).unwrap();
        let before = log_marginal_and_grad(&x, &y, &idx, &start).unwrap().0;
        let fit = fit_hyperparams(&x, &y, &idx, &start, 50, FitBounds { noise_floor: 1e-6 });
        let after = log_marginal_and_grad(&x, &y, &idx, &fit).unwrap().0;
        assert!(after >= before);
    }

    #[test]
    fn incremental_updates_match_rebuild() {
        let x = DMatrix::from_fn(2, 8, |j, i| ((i * 3 + j * 5) % 7) as f64 * 0.4);
        let y = DVector::from_fn(8, |i, _| (i as f64).cos());
        let p = KernelParams::new(vec![0.9, 1.1], 1.2, 0.05).unwrap();
        let mut c = GpCache::build(&x, &y, &[0, 1, 2], &p).unwrap();
        for i in 3..8 {
            c.push(&x, &y, i, &p).unwrap();
        }
        c.remove(&x, &y, 4, &p).unwrap();
        c.remove(&x, &y, 0, &p).unwrap();
        let fresh = GpCache::build(&x, &y, &c.members.clone(), &p).unwrap();
        let mut without = c.members.clone();
        without.retain(|&m| m != 5);
        let held = GpCache::build(&x, &y, &without, &p).unwrap();
        let direct = held.log_predictive(&x, &p, point(&x, 5), y[5]);
        assert!((c.loo_log_predictive(5, y[5]).unwrap() - direct).abs() < 1e-9);
        let q = [0.5, 0.5];
        let (m1, v1) = c.predict(&x, &p, &q);
        let (m2, v2) = fresh.predict(&x, &p, &q);
        assert!((m1 - m2).abs() < 1e-10 && (v1 - v2).abs() < 1e-10);
        assert!((c.log_marginal(&y) - fresh.log_marginal(&y)).abs() < 1e-9);
    }

    proptest! {
        #[test]
        fn variance_bounded_by_prior(
            pts in prop::collection::vec((-2.0f64..2.0, -1.0f64..1.0), 1..15),
            q in -3.0f64..3.0,
            noise in 1e-4f64..0.5,
        ) {
            let x = DMatrix::from_fn(pts.len(), 1, |i, _| pts[i].0);
            let y = DVector::from_fn(pts.len(), |i, _| pts[i].1);
            let p = KernelParams::new(vec![0.8], 1.5, noise).unwrap();
            let (_, v) = gp_posterior(&x, &y, &p, &[q]).unwrap();
            prop_assert!(v >= 0.0 && v <= 1.5 + 1e-12);
        }
    }
}
