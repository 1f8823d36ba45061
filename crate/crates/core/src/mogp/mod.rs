//! Mixture of Gaussian-process experts with kernel-weighted
//! Dirichlet-process gating. Each output dimension is modeled independently.

mod gating;
mod gp;
mod train;

pub use gating::{gating_weights_raw, normalize_existing, GatingParams};
pub use gp::{gp_posterior, KernelParams};
pub use train::{train_mogp, train_mogp_with, TrainOptions};

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::BoxSet;
use gp::GpCache;

/// Version tag written into serialized models.
pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MogpError {
    #[error("invalid hyperparameters: {0}")]
    InvalidParams(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("kernel matrix is not positive definite")]
    IllConditioned,
    #[error("invalid dataset: {0}")]
    Dataset(String),
    #[error("model file: {0}")]
    Format(String),
}

/// Training pairs: states `z` (rows) and observed disturbances `y` (one
/// column per output dimension), with the support box of `y`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    inputs: DMatrix<f64>,
    outputs: DMatrix<f64>,
    support: BoxSet,
}

impl Dataset {
    pub fn new(inputs: DMatrix<f64>, outputs: DMatrix<f64>, support: BoxSet) -> Result<Self, MogpError> {
        if inputs.nrows() == 0 {
            return Err(MogpError::Dataset("no samples".into()));
        }
        if inputs.nrows() != outputs.nrows() {
            return Err(MogpError::Dataset(format!(
                "{} inputs but {} outputs",
                inputs.nrows(),
                outputs.nrows()
            )));
        }
        if outputs.ncols() != support.dim() {
            return Err(MogpError::Dataset(format!(
                "outputs have {} columns, support has dimension {}",
                outputs.ncols(),
                support.dim()
            )));
        }
        if inputs.iter().chain(outputs.iter()).any(|v| !v.is_finite()) {
            return Err(MogpError::Dataset("non-finite entry".into()));
        }
        for (r, y) in outputs.row_iter().enumerate() {
            if !support.contains(&y.transpose(), 1e-12) {
                return Err(MogpError::Dataset(format!(
                    "output row {r} lies outside the support box"
                )));
            }
        }
        Ok(Self {
            inputs,
            outputs,
            support,
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.outputs.ncols()
    }

    pub fn inputs(&self) -> &DMatrix<f64> {
        &self.inputs
    }

    pub fn outputs(&self) -> &DMatrix<f64> {
        &self.outputs
    }

    pub fn support(&self) -> &BoxSet {
        &self.support
    }

    pub fn output_column(&self, dim: usize) -> DVector<f64> {
        self.outputs.column(dim).into_owned()
    }
}

/// Trained state for one output dimension.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DimensionModel {
    /// Expert index of every training point.
    pub assignments: Vec<usize>,
    /// Hyperparameters of each expert.
    pub experts: Vec<KernelParams>,
    /// Score of the selected assignment: GP evidence of all experts plus the
    /// log partition prior.
    pub log_score: f64,
    /// Sweep at which the selected assignment was found (0 = initial pass).
    pub best_sweep: usize,
}

impl DimensionModel {
    pub fn expert_count(&self) -> usize {
        self.experts.len()
    }

    pub fn members(&self, expert: usize) -> Vec<usize> {
        (0..self.assignments.len())
            .filter(|&i| self.assignments[i] == expert)
            .collect()
    }
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format_version: u32,
    gating: GatingParams,
    data: Dataset,
    dims: Vec<DimensionModel>,
    warnings: Vec<String>,
}

/// Trained mixture model. Immutable after construction.
#[derive(Clone, Debug)]
pub struct MoGPModel {
    gating: GatingParams,
    data: Dataset,
    dims: Vec<DimensionModel>,
    warnings: Vec<String>,
    /// Training inputs, one point per column.
    points: DMatrix<f64>,
    caches: Vec<Vec<GpCache>>,
}

/// One Gaussian component `(γ, μ, Σ)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub weight: f64,
    pub mean: f64,
    pub variance: f64,
}

/// Per output dimension, a list of weighted Gaussian components.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixturePrediction {
    pub dims: Vec<Vec<Component>>,
}

impl MixturePrediction {
    /// Degenerate prediction: a single point mass at zero per dimension.
    pub fn zero(dims: usize) -> Self {
        Self {
            dims: vec![
                vec![Component {
                    weight: 1.0,
                    mean: 0.0,
                    variance: 0.0,
                }];
                dims
            ],
        }
    }

    pub fn output_dim(&self) -> usize {
        self.dims.len()
    }
}

/// Which variance each component reports.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum VarianceKind {
    /// Posterior variance of the latent expert function.
    Latent,
    /// Latent variance plus the expert's observation noise: the predictive
    /// distribution of a new disturbance sample.
    Observation,
}

impl MoGPModel {
    pub(crate) fn assemble(
        gating: GatingParams,
        data: Dataset,
        dims: Vec<DimensionModel>,
        warnings: Vec<String>,
    ) -> Result<Self, MogpError> {
        let points = data.inputs().transpose();
        let mut caches = Vec::with_capacity(dims.len());
        for (tau, dm) in dims.iter().enumerate() {
            if dm.assignments.len() != data.len() {
                return Err(MogpError::Format(format!(
                    "dimension {tau}: {} assignments for {} samples",
                    dm.assignments.len(),
                    data.len()
                )));
            }
            if dm.experts.is_empty() {
                return Err(MogpError::Format(format!("dimension {tau} has no experts")));
            }
            let y = data.output_column(tau);
            let mut per = Vec::with_capacity(dm.experts.len());
            for (j, params) in dm.experts.iter().enumerate() {
                params.validate()?;
                let members = dm.members(j);
                if members.is_empty() {
                    return Err(MogpError::Format(format!(
                        "dimension {tau}: expert {j} holds no points"
                    )));
                }
                per.push(GpCache::build(&points, &y, &members, params)?);
            }
            caches.push(per);
        }
        if dims.len() != data.output_dim() {
            return Err(MogpError::Format(format!(
                "{} dimension models for {} outputs",
                dims.len(),
                data.output_dim()
            )));
        }
        Ok(Self {
            gating,
            data,
            dims,
            warnings,
            points,
            caches,
        })
    }

    pub fn gating(&self) -> &GatingParams {
        &self.gating
    }

    pub fn data(&self) -> &Dataset {
        &self.data
    }

    pub fn dimension(&self, tau: usize) -> &DimensionModel {
        &self.dims[tau]
    }

    pub fn output_dim(&self) -> usize {
        self.dims.len()
    }

    /// Number of experts per output dimension.
    pub fn expert_counts(&self) -> Vec<usize> {
        self.dims.iter().map(|d| d.expert_count()).collect()
    }

    /// Conditions noticed during training (e.g. a degenerate dataset).
    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    pub fn to_json(&self) -> String {
        let file = ModelFile {
            format_version: MODEL_FORMAT_VERSION,
            gating: self.gating,
            data: self.data.clone(),
            dims: self.dims.clone(),
            warnings: self.warnings.clone(),
        };
        serde_json::to_string_pretty(&file).expect("model serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, MogpError> {
        let file: ModelFile =
            serde_json::from_str(text).map_err(|e| MogpError::Format(e.to_string()))?;
        if file.format_version != MODEL_FORMAT_VERSION {
            return Err(MogpError::Format(format!(
                "unsupported format version {} (expected {})",
                file.format_version, MODEL_FORMAT_VERSION
            )));
        }
        file.gating.validate()?;
        Self::assemble(file.gating, file.data, file.dims, file.warnings)
    }

    pub fn save(&self, path: &Path) -> Result<(), MogpError> {
        std::fs::write(path, self.to_json()).map_err(|e| MogpError::Format(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, MogpError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| MogpError::Format(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }
}

/// Gating probabilities over the existing experts of dimension `tau`, with
/// the query treated as a new point over all `n` training points.
pub fn gating_weights(model: &MoGPModel, tau: usize, query: &[f64]) -> Vec<f64> {
    let dm = &model.dims[tau];
    let (raw, _) = gating_weights_raw(
        model.data.inputs(),
        &dm.assignments,
        dm.expert_count(),
        &model.gating,
        query,
    );
    normalize_existing(&raw)
}

/// Mixture prediction with latent-function variances.
pub fn predict_mixture(model: &MoGPModel, query: &[f64]) -> MixturePrediction {
    predict_mixture_with(model, query, VarianceKind::Latent)
}

/// Mixture prediction of a new disturbance sample (latent plus noise
/// variance); this is what the controllers consume.
pub fn predict_disturbance(model: &MoGPModel, query: &[f64]) -> MixturePrediction {
    predict_mixture_with(model, query, VarianceKind::Observation)
}

pub fn predict_mixture_with(
    model: &MoGPModel,
    query: &[f64],
    kind: VarianceKind,
) -> MixturePrediction {
    let support = model.data.support();
    let dims = (0..model.output_dim())
        .map(|tau| {
            let weights = gating_weights(model, tau, query);
            let (lo, hi) = (support.lower()[tau], support.upper()[tau]);
            weights
                .iter()
                .zip(&model.caches[tau])
                .zip(&model.dims[tau].experts)
                .map(|((&weight, cache), params)| {
                    let (mean, latent) = cache.predict(&model.points, params, query);
                    let clamped = mean.clamp(lo, hi);
                    if clamped != mean {
                        log::debug!(
                            "dimension {tau}: predicted mean {mean} clamped into [{lo}, {hi}]"
                        );
                    }
                    let variance = match kind {
                        VarianceKind::Latent => latent,
                        VarianceKind::Observation => latent + params.noise_variance,
                    };
                    Component {
                        weight,
                        mean: clamped,
                        variance,
                    }
                })
                .collect()
        })
        .collect();
    MixturePrediction { dims }
}
