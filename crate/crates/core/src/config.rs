//! Experiment configuration and stiffness-budget presets.
//!
//! Preset task stiffness diagonals cover the two planar axes only; the
//! vertical axis of a three-axis preset has no planar counterpart and is
//! omitted. Budgets are always written back in resolved form (explicit
//! `kx_max` and `k_null`) so a resolved config re-parses to itself.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::SymMatrix;
use crate::regularizers::PenaltyConfig;
use crate::sim::{fk, task_jacobian, ArmModel, DisturbanceProfile};
use crate::stiffness::{build_budget, Result as StiffnessResult, StiffnessBudget};
use crate::trainer::{TrainConfig, TrainParams};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {message}")]
    Parse { path: String, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BudgetMode {
    HighStiff,
    Compliance,
    HardNullspace,
    Custom,
}

impl BudgetMode {
    /// `(task stiffness diagonal, null-space stiffness)`; `None` for custom.
    pub fn preset(self) -> Option<([f64; 2], f64)> {
        match self {
            BudgetMode::HighStiff => Some(([1000.0, 1000.0], 100.0)),
            BudgetMode::Compliance => Some(([200.0, 200.0], 50.0)),
            BudgetMode::HardNullspace => Some(([200.0, 200.0], 500.0)),
            BudgetMode::Custom => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BudgetSpec {
    pub mode: BudgetMode,
    /// Task stiffness upper bound per planar axis (N/m); overrides the preset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kx_max: Option<[f64; 2]>,
    /// Null-space joint stiffness (N·m/rad); overrides the preset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k_null: Option<f64>,
}

impl BudgetSpec {
    pub fn preset(mode: BudgetMode) -> Self {
        Self {
            mode,
            kx_max: None,
            k_null: None,
        }
    }

    pub fn custom(kx_max: [f64; 2], k_null: f64) -> Self {
        Self {
            mode: BudgetMode::Custom,
            kx_max: Some(kx_max),
            k_null: Some(k_null),
        }
    }

    pub fn values(&self) -> Result<([f64; 2], f64), ConfigError> {
        let preset = self.mode.preset();
        let kx = self
            .kx_max
            .or(preset.map(|p| p.0))
            .ok_or_else(|| ConfigError::Invalid("custom budget needs `kx_max`".into()))?;
        let k_null = self
            .k_null
            .or(preset.map(|p| p.1))
            .ok_or_else(|| ConfigError::Invalid("custom budget needs `k_null`".into()))?;
        if kx.iter().any(|&k| !(k > 0.0 && k.is_finite())) {
            return Err(ConfigError::Invalid("`kx_max` entries must be positive".into()));
        }
        if !(k_null > 0.0 && k_null.is_finite()) {
            return Err(ConfigError::Invalid("`k_null` must be positive".into()));
        }
        Ok((kx, k_null))
    }

    pub fn resolved(&self) -> Result<Self, ConfigError> {
        let (kx, k_null) = self.values()?;
        Ok(Self {
            mode: self.mode,
            kx_max: Some(kx),
            k_null: Some(k_null),
        })
    }

    /// Builds the joint budget at posture `q`. Panics if the spec is invalid;
    /// call [`BudgetSpec::values`] first.
    pub fn build(&self, model: &ArmModel, q: &[f64]) -> StiffnessResult<StiffnessBudget> {
        let (kx, k_null) = self.values().expect("budget spec validated");
        build_budget(&task_jacobian(model, q), &SymMatrix::from_diag(&kx), k_null, q)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub arm: ArmModel,
    #[serde(default)]
    pub train: TrainParams,
    pub penalty: PenaltyConfig,
    pub budget: BudgetSpec,
    #[serde(default = "DisturbanceProfile::none")]
    pub disturbance: DisturbanceProfile,
    pub output_dir: PathBuf,
    pub seed: u64,
}

impl ExperimentConfig {
    pub fn from_json_str(s: &str, origin: &str) -> Result<Self, ConfigError> {
        let cfg: Self = serde_json::from_str(s).map_err(|e| ConfigError::Parse {
            path: origin.to_string(),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let s = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json_str(&s, &path.display().to_string())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.arm
            .validate()
            .map_err(|e| ConfigError::Invalid(format!("arm: {e}")))?;
        self.train
            .validate()
            .map_err(|e| ConfigError::Invalid(format!("train: {e}")))?;
        self.penalty
            .validate(self.arm.n_links())
            .map_err(|e| ConfigError::Invalid(format!("penalty: {e}")))?;
        self.budget.values()?;
        self.disturbance
            .validate()
            .map_err(|e| ConfigError::Invalid(format!("disturbance: {e}")))?;
        let q0 = &self.arm.default_posture;
        self.budget
            .build(&self.arm, q0)
            .map_err(|e| ConfigError::Invalid(format!("budget at default posture: {e}")))?;
        if !fk(&self.arm, q0).iter().all(|v| v.is_finite()) {
            return Err(ConfigError::Invalid("default posture is not finite".into()));
        }
        Ok(())
    }

    /// Config with defaults applied and the budget in explicit form.
    pub fn resolved(&self) -> Result<Self, ConfigError> {
        let mut c = self.clone();
        c.budget = self.budget.resolved()?;
        Ok(c)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            params: self.train.clone(),
            penalty: self.penalty.clone(),
            budget: self.budget.clone(),
            seed: self.seed,
        }
    }
}
