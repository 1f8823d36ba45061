//! Experiment configuration and the two built-in case studies.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::geometry::BoxSet;
use crate::mpc::{MPCConfig, SystemModel};
use crate::sim::{DisturbanceSpec, SimError, TrainingSettings};

const NUMERICAL: &str = include_str!("../presets/numerical.toml");
const QUADROTOR: &str = include_str!("../presets/quadrotor.toml");

pub const PRESET_NAMES: [&str; 2] = ["numerical", "quadrotor"];

/// Linear system with box constraints; matrices are given row by row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SystemSpec {
    pub a: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
    pub state_lower: Vec<f64>,
    pub state_upper: Vec<f64>,
    pub input_lower: Vec<f64>,
    pub input_upper: Vec<f64>,
    pub disturbance_lower: Vec<f64>,
    pub disturbance_upper: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MpcSettings {
    pub horizon: usize,
    pub q: Vec<Vec<f64>>,
    pub r: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub terminal_weight: Option<Vec<Vec<f64>>>,
    pub risk_level: f64,
    pub mrpi_eps: f64,
    pub solver_tol: f64,
    pub anchor_margin: f64,
    pub input_backoff: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CampaignSettings {
    pub runs: usize,
    pub steps: usize,
    pub base_seed: u64,
    pub x0: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub name: String,
    pub output_dir: String,
    pub system: SystemSpec,
    pub mpc: MpcSettings,
    pub disturbance: DisturbanceSpec,
    pub training: TrainingSettings,
    pub campaign: CampaignSettings,
}

fn matrix(rows: &[Vec<f64>], name: &str) -> Result<DMatrix<f64>, SimError> {
    let r = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    if r == 0 || c == 0 || rows.iter().any(|row| row.len() != c) {
        return Err(SimError::Config(format!("matrix {name} must be a nonempty rectangle")));
    }
    Ok(DMatrix::from_fn(r, c, |i, j| rows[i][j]))
}

fn boxed(lower: &[f64], upper: &[f64], name: &str) -> Result<BoxSet, SimError> {
    BoxSet::from_slices(lower, upper).map_err(|e| SimError::Config(format!("{name}: {e}")))
}

impl ExperimentConfig {
    pub fn preset(name: &str) -> Option<Self> {
        let text = match name {
            "numerical" => NUMERICAL,
            "quadrotor" => QUADROTOR,
            _ => return None,
        };
        Some(Self::from_toml(text).expect("built-in presets parse"))
    }

    pub fn from_toml(text: &str) -> Result<Self, SimError> {
        toml::from_str(text).map_err(|e| SimError::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    /// Reads a file, or a preset when `source` names one and no such file
    /// exists.
    pub fn load(source: &str) -> Result<Self, SimError> {
        let path = Path::new(source);
        if !path.exists() {
            if let Some(cfg) = Self::preset(source) {
                return Ok(cfg);
            }
        }
        let text = std::fs::read_to_string(path)
            .map_err(|e| SimError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn build_system(&self) -> Result<SystemModel, SimError> {
        let s = &self.system;
        let sys = SystemModel::new(
            matrix(&s.a, "A")?,
            matrix(&s.b, "B")?,
            boxed(&s.state_lower, &s.state_upper, "state set")?,
            boxed(&s.input_lower, &s.input_upper, "input set")?.to_polytope(),
            boxed(&s.disturbance_lower, &s.disturbance_upper, "disturbance set")?,
        )?;
        Ok(sys)
    }

    pub fn build_mpc_config(&self) -> Result<MPCConfig, SimError> {
        let m = &self.mpc;
        let mut cfg = MPCConfig::new(m.horizon, matrix(&m.q, "Q")?, matrix(&m.r, "R")?, m.risk_level);
        cfg.terminal_weight = m
            .terminal_weight
            .as_ref()
            .map(|p| matrix(p, "P"))
            .transpose()?;
        cfg.mrpi_eps = m.mrpi_eps;
        cfg.solver_tol = m.solver_tol;
        cfg.anchor_margin = m.anchor_margin;
        cfg.input_backoff = m.input_backoff;
        Ok(cfg)
    }

    pub fn x0(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.campaign.x0)
    }

    /// Checks that the system, controller settings, disturbance law and
    /// campaign are mutually consistent, before anything is computed.
    pub fn validate(&self) -> Result<(), SimError> {
        let sys = self.build_system()?;
        let cfg = self.build_mpc_config()?;
        cfg.validate(sys.state_dim(), sys.input_dim())?;
        self.disturbance.validate()?;
        let d = &self.disturbance;
        if d.dim() != sys.state_dim() {
            return Err(SimError::Config("disturbance law dimension differs from the state".into()));
        }
        if d.support_lower != self.system.disturbance_lower || d.support_upper != self.system.disturbance_upper {
            return Err(SimError::Config(
                "disturbance law support must equal the system's disturbance set".into(),
            ));
        }
        let x0 = self.x0();
        if x0.len() != sys.state_dim() || !sys.state.contains(&x0, 0.0) {
            return Err(SimError::Config("initial state must lie in the state set".into()));
        }
        if self.campaign.runs == 0 {
            return Err(SimError::Config("campaign needs at least one run".into()));
        }
        if self.training.n_points < 10 || self.training.sweeps == 0 {
            return Err(SimError::Config("training needs at least 10 points and one sweep".into()));
        }
        Ok(())
    }
}
