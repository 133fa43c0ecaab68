//! Loaded checkpoints and their warm-up material, shared by all sessions.

use std::collections::BTreeMap;
use std::sync::Arc;

use tptn_core::checkpoint::Checkpoint;
use tptn_core::data::Dataset;
use tptn_core::features::MotionSequence;
use tptn_core::synthesis::Synthesizer;

use crate::config::CheckpointEntry;
use crate::error::{Result, ServiceError};

/// Precision sessions run at.
pub type Precision = f32;

#[derive(Debug)]
pub struct Model {
    pub synth: Arc<Synthesizer<Precision>>,
    /// Named sequences a session may warm up from.
    pub warmups: Vec<MotionSequence>,
}

impl Model {
    pub fn warmup(&self, name: Option<&str>) -> Option<&MotionSequence> {
        match name {
            None => self.warmups.first(),
            Some(n) => self.warmups.iter().find(|s| s.name == n),
        }
    }
}

#[derive(Debug, Default)]
pub struct Registry {
    models: BTreeMap<String, Arc<Model>>,
}

impl Registry {
    pub fn load(entries: &[CheckpointEntry]) -> Result<Self> {
        let mut r = Self::default();
        for e in entries {
            let ck = Checkpoint::<Precision>::load(&e.path)?;
            let ds = Dataset::load(&e.warmup)?;
            r.insert(
                &e.id,
                Synthesizer::from_checkpoint(ck),
                ds.sequences.into_iter().map(|s| s.motion).collect(),
            )?;
        }
        Ok(r)
    }

    pub fn insert(
        &mut self,
        id: &str,
        synth: Synthesizer<Precision>,
        warmups: Vec<MotionSequence>,
    ) -> Result<()> {
        if warmups.is_empty() {
            return Err(ServiceError::Config(format!(
                "checkpoint {id} has no warm-up sequences"
            )));
        }
        if self.models.contains_key(id) {
            return Err(ServiceError::Config(format!(
                "duplicate checkpoint id {id}"
            )));
        }
        self.models.insert(
            id.to_string(),
            Arc::new(Model {
                synth: Arc::new(synth),
                warmups,
            }),
        );
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<Arc<Model>> {
        self.models.get(id).cloned()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.models.keys().map(String::as_str)
    }

    pub fn is_empty(&self) -> bool {
        self.models.is_empty()
    }
}
