use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{FReMuReModel, ModelConfig, TrainConfig};
use crate::data::RelationPriors;
use crate::error::{Error, Result};
use crate::heads::Head;
use crate::numcore::{AdamState, StoredAdam, StoredTensor};

/// Everything needed to rebuild a model and resume its optimizer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub train: TrainConfig,
    pub parameters: BTreeMap<String, StoredTensor>,
    pub optimizer: Option<StoredAdam>,
    pub epoch: usize,
    pub seed: u64,
    pub priors: RelationPriors,
}

impl Checkpoint {
    pub fn capture(
        model: &FReMuReModel,
        train: &TrainConfig,
        optimizer: Option<&AdamState>,
        epoch: usize,
        seed: u64,
    ) -> Self {
        Self {
            config: model.cfg.clone(),
            train: *train,
            parameters: model.store.to_map(),
            optimizer: optimizer.map(|a| a.to_stored(&model.store)),
            epoch,
            seed,
            priors: model.priors.clone(),
        }
    }

    pub fn restore(&self) -> Result<(FReMuReModel, Option<AdamState>)> {
        let mut model = FReMuReModel::new(self.config.clone(), self.priors.clone(), self.seed)?;
        model.store.load_map(&self.parameters)?;
        let adam = self
            .optimizer
            .as_ref()
            .map(|s| AdamState::from_stored(s, &model.store))
            .transpose()?;
        Ok((model, adam))
    }

    /// Every mixture variance must sit at or above its floor.
    pub fn check_variance_floor(&self) -> Result<()> {
        let (model, _) = self.restore()?;
        for (r, head) in model.heads.iter().enumerate() {
            if let Head::GmmPlus(h) = head {
                let floor = h.cfg.sigma_min;
                if let Some(v) = h
                    .variances(&model.store)
                    .into_iter()
                    .find(|&v| !(v >= floor))
                {
                    return Err(Error::Numerical {
                        epoch: self.epoch,
                        step: 0,
                        message: format!(
                            "{} head variance {v} fell below sigma_min {floor}",
                            super::RELATIONS[r]
                        ),
                    });
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| Error::parse("checkpoint", e))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::parse("checkpoint", e))
    }

    /// Writes after checking the variance floor.
    pub fn save(&self, path: &Path) -> Result<()> {
        self.check_variance_floor()?;
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}
