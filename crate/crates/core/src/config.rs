//! The JSON run configuration shared by every command.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::DataConfig;
use crate::error::{MerlinError, Result};
use crate::eval::EvalConfig;
use crate::losses::MerlinConfig;
use crate::model::StidConfig;
use crate::optim::OptimizerConfig;
use crate::train::TrainConfig;

/// Every section is optional; omitted fields take their defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: StidConfig,
    pub merlin: MerlinConfig,
    pub optimizer: OptimizerConfig,
    pub trainer: TrainConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| MerlinError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| MerlinError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.model.validate()?;
        self.merlin.validate(self.model.hidden_dim())?;
        self.optimizer.validate()?;
        self.trainer.validate()?;
        self.eval.validate()?;
        if self.model.steps_per_day != self.data.steps_per_day {
            return Err(MerlinError::Config(format!(
                "model.steps_per_day {} differs from data.steps_per_day {}",
                self.model.steps_per_day, self.data.steps_per_day
            )));
        }
        Ok(())
    }
}
