//! Model checkpoints: network weights plus everything needed to run them.

use std::path::Path;

use serde::{Deserialize, Serialize};
use tptn_autodiff::{Archive, Real};

use crate::error::{CoreError, Result};
use crate::features::NormStats;
use crate::losses::LossBreakdown;
use crate::model::{ModelConfig, Tptn};
use crate::skeleton::Skeleton;

const FORMAT: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format: u32,
    pub config: ModelConfig,
    pub stats: NormStats,
    pub type_names: Vec<String>,
    /// Skeleton used for the shape controls and playback when the caller
    /// does not supply one.
    pub skeleton: Skeleton,
    pub fps: f64,
    pub epoch: usize,
    #[serde(default)]
    pub loss: Option<LossBreakdown>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint<T: Real> {
    pub meta: CheckpointMeta,
    pub model: Tptn<T>,
}

impl<T: Real> Checkpoint<T> {
    pub fn new(
        model: Tptn<T>,
        stats: NormStats,
        type_names: Vec<String>,
        skeleton: Skeleton,
        fps: f64,
        epoch: usize,
    ) -> Self {
        Self {
            meta: CheckpointMeta {
                format: FORMAT,
                config: model.config.clone(),
                stats,
                type_names,
                skeleton,
                fps,
                epoch,
                loss: None,
            },
            model,
        }
    }

    pub fn to_archive(&self) -> Result<Archive<T>> {
        let mut a = Archive::new(serde_json::to_string(&self.meta)?);
        for (_, p) in self.model.params.iter() {
            a.push(p.name.clone(), p.value.clone());
        }
        Ok(a)
    }

    pub fn from_archive(a: Archive<T>) -> Result<Self> {
        let meta: CheckpointMeta = serde_json::from_str(&a.metadata)?;
        if meta.format != FORMAT {
            return Err(CoreError::Checkpoint(format!(
                "unsupported format version {}",
                meta.format
            )));
        }
        if meta.stats.layout.n_types != meta.config.n_types
            || meta.type_names.len() != meta.config.n_types
        {
            return Err(CoreError::Checkpoint(
                "type count disagrees between config, stats and names".into(),
            ));
        }
        let model = Tptn::from_params(meta.config.clone(), &a.tensors)?;
        Ok(Self { meta, model })
    }

    /// Atomic write.
    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(self.to_archive()?.save(path)?)
    }

    /// Loads at precision `T` whatever precision was saved.
    pub fn load(path: &Path) -> Result<Self> {
        let a = Archive::load(path)
            .map_err(|e| CoreError::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::from_archive(a)
    }

    /// Drop the training-only consistency modules.
    pub fn for_inference(mut self) -> Self {
        self.model = self.model.without_consistency_modules();
        self
    }
}
