//! JSON run configuration. Every section is optional and unknown keys are
//! rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dualbranch::TrainConfig;
use crate::ensemble::{Objective, DEFAULT_STEP};
use crate::error::{Error, Result};
use crate::losses::AslParams;
use crate::zeroshot::{EnsembleMode, DEFAULT_TEMPERATURE};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerSection {
    pub lr: f64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub eps: f64,
}

impl Default for OptimizerSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self { lr: t.lr_max, weight_decay: t.weight_decay, betas: t.betas, eps: t.eps }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleSection {
    pub t_max: usize,
    pub lr_min: f64,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        Self { t_max: 7, lr_min: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmaSection {
    pub decay: f64,
}

impl Default for EmaSection {
    fn default() -> Self {
        Self { decay: 0.999 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnsembleSection {
    pub step: f64,
    pub objective: Objective,
}

impl Default for EnsembleSection {
    fn default() -> Self {
        Self { step: DEFAULT_STEP, objective: Objective::Map }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ZeroShotSection {
    pub temperature: f64,
    pub mode: EnsembleMode,
}

impl Default for ZeroShotSection {
    fn default() -> Self {
        Self { temperature: DEFAULT_TEMPERATURE, mode: EnsembleMode::Prob }
    }
}

/// Training-loop settings that are not optimizer hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingSection {
    pub batch_size: usize,
    pub epochs: usize,
    pub joint_dim: usize,
    pub freeze_temperature: bool,
}

impl Default for TrainingSection {
    fn default() -> Self {
        Self { batch_size: 64, epochs: 7, joint_dim: 32, freeze_temperature: false }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub asl: AslParams,
    pub alpha: Option<f64>,
    pub optimizer: OptimizerSection,
    pub schedule: ScheduleSection,
    pub ema: EmaSection,
    pub ensemble: EnsembleSection,
    pub zeroshot: ZeroShotSection,
    pub training: TrainingSection,
    pub seed: u64,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            serde_json::from_str(text).map_err(|e| Error::invalid("run config", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.train_config().validate()?;
        if !(self.ensemble.step > 0.0 && self.ensemble.step <= 1.0) {
            return Err(Error::invalid("ensemble.step", format!("{} not in (0, 1]", self.ensemble.step)));
        }
        if !(self.zeroshot.temperature > 0.0 && self.zeroshot.temperature.is_finite()) {
            return Err(Error::invalid("zeroshot.temperature", "must be positive"));
        }
        if self.training.joint_dim == 0 {
            return Err(Error::invalid("training.joint_dim", "must be positive"));
        }
        Ok(())
    }

    /// Training hyperparameters; `alpha` falls back to the library default.
    pub fn train_config(&self) -> TrainConfig {
        let d = TrainConfig::default();
        TrainConfig {
            lr_max: self.optimizer.lr,
            lr_min: self.schedule.lr_min,
            weight_decay: self.optimizer.weight_decay,
            betas: self.optimizer.betas,
            eps: self.optimizer.eps,
            ema_decay: self.ema.decay,
            t_max: self.schedule.t_max,
            alpha: self.alpha.unwrap_or(d.alpha),
            asl: self.asl,
            batch_size: self.training.batch_size,
            epochs: self.training.epochs,
            seed: self.seed,
            freeze_temperature: self.training.freeze_temperature,
        }
    }
}
