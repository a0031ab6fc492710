use std::path::Path;

use crate::data::NormStats;
use crate::error::{MerlinError, Result};
use crate::losses::ProjectionParams;
use crate::model::{Checkpoint, StidParams};
use crate::optim::AdamState;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Teacher,
    Student,
}

/// A trained model with everything needed to evaluate it or resume training.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub role: Role,
    pub model: StidParams,
    /// Contrastive projection head; students only.
    pub proj: Option<ProjectionParams>,
    pub stats: NormStats,
    pub premask_rate: f64,
    pub adam: Option<AdamState>,
    pub epochs_done: usize,
}

impl ModelBundle {
    /// Names of the optimized tensors, in optimizer-slot order.
    pub fn param_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self.model.named().into_iter().map(|(n, _)| n).collect();
        if let Some(p) = &self.proj {
            names.extend(p.named().into_iter().map(|(n, _)| n));
        }
        names
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new();
        ck.set_meta("role", matches!(self.role, Role::Student) as u64);
        ck.set_meta("epochs_done", self.epochs_done as u64);
        ck.set_meta("premask_rate_bits", self.premask_rate.to_bits());
        self.model.export(&mut ck, "");
        if let Some(p) = &self.proj {
            p.export(&mut ck, "");
        }
        ck.insert("norm.mean", Tensor::from_vec(self.stats.mean.clone()));
        ck.insert("norm.std", Tensor::from_vec(self.stats.std.clone()));
        if let Some(a) = &self.adam {
            a.export(&mut ck, "adam.", &self.param_names())?;
        }
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let role = match ck.meta("role")? {
            0 => Role::Teacher,
            1 => Role::Student,
            r => return Err(MerlinError::Checkpoint(format!("unknown role {r}"))),
        };
        let model = StidParams::import(ck, "")?;
        let proj = if ck.has_tensor("proj.w") {
            Some(ProjectionParams::import(ck, "")?)
        } else {
            None
        };
        let stats = NormStats {
            mean: ck.tensor("norm.mean")?.data().to_vec(),
            std: ck.tensor("norm.std")?.data().to_vec(),
        };
        if stats.n_vars() != model.config.n_vars {
            return Err(MerlinError::Checkpoint(format!(
                "normalization covers {} variables, model {}",
                stats.n_vars(),
                model.config.n_vars
            )));
        }
        let mut bundle = Self {
            role,
            model,
            proj,
            stats,
            premask_rate: f64::from_bits(ck.meta("premask_rate_bits")?),
            adam: None,
            epochs_done: ck.meta_usize("epochs_done")?,
        };
        if ck.has_meta("adam.step") {
            bundle.adam = Some(AdamState::import(ck, "adam.", &bundle.param_names())?);
        }
        Ok(bundle)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}
