//! Single-file checkpoints: parameter archive, vocabulary, config and the
//! architecture hash that guards loading.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::Vocabulary;
use crate::error::{Error, Result};
use crate::harness::config::TrainConfig;
use crate::harness::model::{arch_hash, Model};
use crate::harness::record::Phase;
use crate::nn::StoredMatrix;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub arch_hash: String,
    pub phase: Phase,
    pub epoch: usize,
    pub config: TrainConfig,
    pub vocab: Vocabulary,
    pub params: BTreeMap<String, StoredMatrix>,
}

impl Checkpoint {
    pub fn of(model: &Model, phase: Phase, epoch: usize) -> Self {
        Self {
            arch_hash: model.arch_hash(),
            phase,
            epoch,
            config: model.cfg.clone(),
            vocab: model.vocab.clone(),
            params: model.store.to_archive(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::Checkpoint(format!("no checkpoint at {}", path.display())));
        }
        let mut ck: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        ck.vocab = ck.vocab.reindex();
        Ok(ck)
    }

    /// Rebuild the model. With `config` given, the checkpoint must match its
    /// architecture hash unless `force` is set; the given config then
    /// replaces the stored one (training settings may differ freely).
    pub fn into_model(self, config: Option<&TrainConfig>, force: bool) -> Result<Model> {
        let stored = arch_hash(&self.config, self.vocab.len());
        if stored != self.arch_hash {
            return Err(Error::Checkpoint("stored hash does not match stored config".into()));
        }
        let cfg = match config {
            Some(c) => {
                let wanted = arch_hash(c, self.vocab.len());
                if wanted != self.arch_hash && !force {
                    return Err(Error::Checkpoint(format!(
                        "architecture hash mismatch: checkpoint {} vs config {}",
                        &self.arch_hash[..12],
                        &wanted[..12]
                    )));
                }
                c.clone()
            }
            None => self.config.clone(),
        };
        let mut model = Model::new(&cfg, self.vocab)?;
        model.store.load_archive(&self.params).map_err(Error::Checkpoint)?;
        Ok(model)
    }
}
