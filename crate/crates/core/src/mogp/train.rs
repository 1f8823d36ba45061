use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::gating::weighted_counts;
use super::gp::{fit_hyperparams, gp_posterior_log_prior, point, FitBounds, GpCache};
use super::{Dataset, DimensionModel, GatingParams, KernelParams, MoGPModel, MogpError};

/// Sampler settings.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainOptions {
    /// Gibbs sweeps over all points.
    pub sweeps: usize,
    /// Hyperparameters are refit after the initial pass and every this many
    /// sweeps.
    pub refit_every: usize,
    /// Gradient steps per refit.
    pub refit_steps: usize,
    /// Experts with fewer points keep their current hyperparameters.
    pub min_refit_size: usize,
    /// Lower bound on fitted noise variances.
    pub noise_floor: f64,
    /// Experts of the selected assignment holding fewer points are
    /// dissolved and their points moved to the best remaining expert.
    pub min_expert_size: usize,
    /// Cap on the number of experts; `Some(1)` trains a single GP.
    pub max_experts: Option<usize>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            sweeps: 200,
            refit_every: 20,
            refit_steps: 50,
            min_refit_size: 3,
            noise_floor: 1e-6,
            min_expert_size: 3,
            max_experts: None,
        }
    }
}

/// Trains with default options and the given sweep count.
pub fn train_mogp(
    data: &Dataset,
    gating: GatingParams,
    kernel_init: KernelParams,
    seed: u64,
    iters: usize,
) -> Result<MoGPModel, MogpError> {
    let opts = TrainOptions {
        sweeps: iters,
        ..TrainOptions::default()
    };
    train_mogp_with(data, gating, kernel_init, seed, &opts)
}

/// Collapsed Gibbs sampling over expert indicators, one chain per output
/// dimension, keeping the highest-scoring assignment seen.
pub fn train_mogp_with(
    data: &Dataset,
    gating: GatingParams,
    kernel_init: KernelParams,
    seed: u64,
    opts: &TrainOptions,
) -> Result<MoGPModel, MogpError> {
    gating.validate()?;
    kernel_init.validate()?;
    if kernel_init.input_dim() != data.input_dim() {
        return Err(MogpError::Shape(format!(
            "kernel has {} lengthscales, inputs have dimension {}",
            kernel_init.input_dim(),
            data.input_dim()
        )));
    }
    if opts.sweeps == 0 {
        return Err(MogpError::InvalidParams("at least one sweep is required".into()));
    }
    if opts.max_experts == Some(0) || opts.refit_every == 0 {
        return Err(MogpError::InvalidParams(
            "expert cap and refit period must be positive".into(),
        ));
    }
    let mut warnings = Vec::new();
    let degenerate = data.len() > 1 && inputs_identical(data.inputs());
    if degenerate {
        warnings.push("all training inputs coincide; using a single expert".to_string());
        log::warn!("all training inputs coincide; using a single expert");
    }
    let single = degenerate || data.len() == 1 || opts.max_experts == Some(1);

    let log_k = log_gating_matrix(data.inputs(), &gating);
    let pts = data.inputs().transpose();
    let dims: Vec<Result<DimensionModel, MogpError>> = (0..data.output_dim())
        .into_par_iter()
        .map(|tau| {
            let y = data.output_column(tau);
            let mut chain = Chain {
                inputs: &pts,
                y: &y,
                log_k: &log_k,
                gating: &gating,
                kernel_init: &kernel_init,
                opts,
                assign: Vec::new(),
                experts: Vec::new(),
            };
            if single {
                chain.run_single()
            } else {
                let mut rng = ChaCha8Rng::seed_from_u64(dimension_seed(seed, tau));
                chain.run(&mut rng)
            }
        })
        .collect();
    let dims = dims.into_iter().collect::<Result<Vec<_>, _>>()?;
    MoGPModel::assemble(gating, data.clone(), dims, warnings)
}

fn dimension_seed(seed: u64, tau: usize) -> u64 {
    seed ^ (tau as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

fn inputs_identical(x: &DMatrix<f64>) -> bool {
    let first = x.row(0);
    x.row_iter().all(|r| r == first)
}

fn log_gating_matrix(x: &DMatrix<f64>, gating: &GatingParams) -> DMatrix<f64> {
    let n = x.nrows();
    let rows: Vec<Vec<f64>> = (0..n).map(|i| x.row(i).iter().copied().collect()).collect();
    DMatrix::from_fn(n, n, |a, b| gating.log_kernel(&rows[a], &rows[b]))
}

struct Expert {
    params: KernelParams,
    cache: GpCache,
}

struct Chain<'a> {
    /// Training inputs, one point per column.
    inputs: &'a DMatrix<f64>,
    y: &'a DVector<f64>,
    log_k: &'a DMatrix<f64>,
    gating: &'a GatingParams,
    kernel_init: &'a KernelParams,
    opts: &'a TrainOptions,
    assign: Vec<usize>,
    experts: Vec<Expert>,
}

impl Chain<'_> {
    fn n(&self) -> usize {
        self.y.len()
    }

    fn bounds(&self) -> FitBounds {
        FitBounds {
            noise_floor: self.opts.noise_floor,
        }
    }

    fn run_single(&mut self) -> Result<DimensionModel, MogpError> {
        let all: Vec<usize> = (0..self.n()).collect();
        let mut params = self.kernel_init.clone();
        if self.n() >= self.opts.min_refit_size {
            let rounds = self.opts.sweeps.div_ceil(self.opts.refit_every).max(1);
            for _ in 0..rounds {
                params = fit_hyperparams(
                    self.inputs,
                    self.y,
                    &all,
                    &params,
                    self.opts.refit_steps,
                    self.bounds(),
                );
            }
        }
        let cache = GpCache::build(self.inputs, self.y, &all, &params)?;
        self.assign = vec![0; self.n()];
        self.experts = vec![Expert { params, cache }];
        let log_score = self.score();
        Ok(DimensionModel {
            assignments: self.assign.clone(),
            experts: vec![self.experts[0].params.clone()],
            log_score,
            best_sweep: 0,
        })
    }

    fn run(&mut self, rng: &mut ChaCha8Rng) -> Result<DimensionModel, MogpError> {
        self.initial_pass(rng)?;
        self.refit()?;
        let mut best = self.snapshot(0);
        for sweep in 1..=self.opts.sweeps {
            for i in 0..self.n() {
                self.resample(i, rng)?;
            }
            if sweep % self.opts.refit_every == 0 && sweep < self.opts.sweeps {
                self.refit()?;
            }
            let cand = self.snapshot(sweep);
            if cand.log_score > best.log_score {
                best = cand;
            }
        }
        self.restore(&best)?;
        if self.dissolve_small()? {
            best = self.snapshot(best.best_sweep);
        }
        Ok(canonical_labels(best))
    }

    fn restore(&mut self, dm: &DimensionModel) -> Result<(), MogpError> {
        self.assign = dm.assignments.clone();
        self.experts = dm
            .experts
            .iter()
            .enumerate()
            .map(|(j, params)| {
                let members = dm.members(j);
                GpCache::build(self.inputs, self.y, &members, params).map(|cache| Expert {
                    params: params.clone(),
                    cache,
                })
            })
            .collect::<Result<_, _>>()?;
        Ok(())
    }

    /// Moves the points of undersized experts to the remaining expert with
    /// the highest gating-weighted predictive density. Returns whether
    /// anything changed.
    fn dissolve_small(&mut self) -> Result<bool, MogpError> {
        let small: Vec<usize> = (0..self.experts.len())
            .filter(|&j| self.experts[j].cache.members.len() < self.opts.min_expert_size)
            .collect();
        if small.is_empty() || small.len() == self.experts.len() {
            return Ok(false);
        }
        let mut moved: Vec<usize> = small
            .iter()
            .flat_map(|&j| self.experts[j].cache.members.clone())
            .collect();
        moved.sort_unstable();
        for &i in &moved {
            self.unplace(i)?;
        }
        for &i in &moved {
            let counts = self.held_out_counts(i);
            let zi = point(self.inputs, i).to_vec();
            let best = (0..self.experts.len())
                .map(|j| {
                    let e = &self.experts[j];
                    let lp = e.cache.log_predictive(self.inputs, &e.params, &zi, self.y[i]);
                    (j, counts[j].max(1e-300).ln() + lp)
                })
                .max_by(|a, b| a.1.total_cmp(&b.1))
                .map(|(j, _)| j)
                .expect("at least one expert remains");
            self.place(i, best)?;
        }
        Ok(true)
    }

    /// Sequential urn pass: each point joins an existing expert or opens a
    /// new one given the points placed before it.
    fn initial_pass(&mut self, rng: &mut ChaCha8Rng) -> Result<(), MogpError> {
        self.assign = Vec::with_capacity(self.n());
        self.experts.clear();
        for i in 0..self.n() {
            let log_k_row: Vec<Option<f64>> = (0..i).map(|b| Some(self.log_k[(i, b)])).collect();
            let counts = weighted_counts(
                log_k_row.iter().copied(),
                &self.assign[..i],
                self.experts.len(),
                i as f64,
            );
            let choice = self.draw(i, &counts, None, rng);
            self.place(i, choice)?;
        }
        Ok(())
    }

    fn resample(&mut self, i: usize, rng: &mut ChaCha8Rng) -> Result<(), MogpError> {
        let own = self.assign[i];
        let loo = if self.experts[own].cache.members.len() > 1 {
            self.experts[own].cache.loo_log_predictive(i, self.y[i])
        } else {
            None
        };
        let Some(own_lp) = loo else {
            self.unplace(i)?;
            let counts = self.held_out_counts(i);
            let choice = self.draw(i, &counts, None, rng);
            return self.place(i, choice);
        };
        // The point's expert keeps other members, so labels stay stable and
        // the factor only changes when the point actually moves.
        let counts = self.held_out_counts(i);
        let choice = self.draw(i, &counts, Some((own, own_lp)), rng);
        if choice != own {
            self.unplace(i)?;
            self.place(i, choice)?;
        }
        Ok(())
    }

    /// Kernel-weighted counts for point `i` over all other placed points.
    fn held_out_counts(&self, i: usize) -> Vec<f64> {
        let log_k_row: Vec<Option<f64>> = (0..self.n())
            .map(|b| (b != i && self.assign[b] != usize::MAX).then(|| self.log_k[(i, b)]))
            .collect();
        let assign: Vec<usize> = self
            .assign
            .iter()
            .map(|&c| if c == usize::MAX { 0 } else { c })
            .collect();
        let placed = log_k_row.iter().filter(|v| v.is_some()).count();
        weighted_counts(log_k_row.iter().copied(), &assign, self.experts.len(), placed as f64)
    }

    /// Samples an expert index for point `i`; `experts.len()` means new.
    /// `own` supplies the held-out log density for the expert that still
    /// contains `i`.
    fn draw(
        &self,
        i: usize,
        counts: &[f64],
        own: Option<(usize, f64)>,
        rng: &mut ChaCha8Rng,
    ) -> usize {
        let zi = point(self.inputs, i).to_vec();
        let yi = self.y[i];
        let mut logp: Vec<f64> = self
            .experts
            .iter()
            .zip(counts)
            .enumerate()
            .map(|(j, (e, &c))| {
                if c > 0.0 {
                    let lp = match own {
                        Some((o, lp)) if o == j => lp,
                        _ => e.cache.log_predictive(self.inputs, &e.params, &zi, yi),
                    };
                    c.ln() + lp
                } else {
                    f64::NEG_INFINITY
                }
            })
            .collect();
        let allow_new = self
            .opts
            .max_experts
            .map_or(true, |m| self.experts.len() < m);
        if allow_new || self.experts.is_empty() {
            logp.push(self.gating.concentration.ln() + gp_posterior_log_prior(self.kernel_init, &zi, yi));
        }
        let max = logp.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let probs: Vec<f64> = logp.iter().map(|l| (l - max).exp()).collect();
        let total: f64 = probs.iter().sum();
        let mut u = rng.gen::<f64>() * total;
        for (j, p) in probs.iter().enumerate() {
            if u < *p {
                return j;
            }
            u -= p;
        }
        probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
    }

    fn place(&mut self, i: usize, choice: usize) -> Result<(), MogpError> {
        if choice == self.experts.len() {
            let params = self.kernel_init.clone();
            let cache = GpCache::build(self.inputs, self.y, &[i], &params)?;
            self.experts.push(Expert { params, cache });
        } else {
            let e = &mut self.experts[choice];
            e.cache.push(self.inputs, self.y, i, &e.params)?;
        }
        if i < self.assign.len() {
            self.assign[i] = choice;
        } else {
            self.assign.push(choice);
        }
        Ok(())
    }

    fn unplace(&mut self, i: usize) -> Result<(), MogpError> {
        let j = self.assign[i];
        let e = &mut self.experts[j];
        e.cache.remove(self.inputs, self.y, i, &e.params)?;
        self.assign[i] = usize::MAX;
        if e.cache.members.is_empty() {
            self.experts.remove(j);
            for c in self.assign.iter_mut() {
                if *c != usize::MAX && *c > j {
                    *c -= 1;
                }
            }
        }
        Ok(())
    }

    fn refit(&mut self) -> Result<(), MogpError> {
        let bounds = self.bounds();
        for e in self.experts.iter_mut() {
            if e.cache.members.len() < self.opts.min_refit_size {
                continue;
            }
            let params = fit_hyperparams(
                self.inputs,
                self.y,
                &e.cache.members,
                &e.params,
                self.opts.refit_steps,
                bounds,
            );
            let cache = GpCache::build(self.inputs, self.y, &e.cache.members, &params)?;
            e.params = params;
            e.cache = cache;
        }
        Ok(())
    }

    /// GP evidence of every expert plus the log probability of the
    /// partition under the Chinese-restaurant prior with concentration `α`.
    fn score(&self) -> f64 {
        let evidence: f64 = self.experts.iter().map(|e| e.cache.log_marginal(self.y)).sum();
        let alpha = self.gating.concentration;
        let mut prior = 0.0;
        for e in &self.experts {
            prior += alpha.ln() + ln_gamma(e.cache.members.len() as f64);
        }
        for i in 0..self.n() {
            prior -= (alpha + i as f64).ln();
        }
        evidence + prior
    }

    fn snapshot(&self, sweep: usize) -> DimensionModel {
        DimensionModel {
            assignments: self.assign.clone(),
            experts: self.experts.iter().map(|e| e.params.clone()).collect(),
            log_score: self.score(),
            best_sweep: sweep,
        }
    }
}

fn ln_gamma(x: f64) -> f64 {
    // integer arguments only: ln((x-1)!)
    (1..x as usize).map(|k| (k as f64).ln()).sum()
}

/// Relabels experts in order of their first member.
fn canonical_labels(mut dm: DimensionModel) -> DimensionModel {
    let mut order: Vec<usize> = Vec::new();
    for &c in &dm.assignments {
        if !order.contains(&c) {
            order.push(c);
        }
    }
    let mut relabel = vec![0; dm.experts.len()];
    for (new, &old) in order.iter().enumerate() {
        relabel[old] = new;
    }
    dm.assignments = dm.assignments.iter().map(|&c| relabel[c]).collect();
    dm.experts = order.iter().map(|&old| dm.experts[old].clone()).collect();
    dm
}
