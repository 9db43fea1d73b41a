//! Model checkpoints on top of the named-tensor archive.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::archive::{read_archive, write_archive, NamedTensor};
use crate::error::{Error, Result};
use crate::perceptual::FeatureExtractorSpec;
use crate::vae::{ArchitectureConfig, ObjectiveConfig, Vae};

pub const CHECKPOINT_KIND: &str = "numvae-checkpoint";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub kind: String,
    pub arch: ArchitectureConfig,
    pub objective: ObjectiveConfig,
    pub extractor: FeatureExtractorSpec,
    pub epoch: usize,
    pub master_seed: u64,
    pub lr: f64,
    pub val_loss_history: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn from_model(model: &Vae<f32>, meta: CheckpointMeta) -> Self {
        Self {
            meta,
            tensors: model.named_tensors(),
        }
    }

    /// Rebuilds the model described by the metadata.
    pub fn model(&self) -> Result<Vae<f32>> {
        let mut vae = Vae::new(self.meta.arch.clone(), 0)?;
        vae.load_tensors(&self.tensors)?;
        Ok(vae)
    }
}

pub fn save_checkpoint(checkpoint: &Checkpoint, path: &Path) -> Result<()> {
    let meta = serde_json::to_value(&checkpoint.meta).map_err(|e| Error::Format(e.to_string()))?;
    write_archive(path, &meta, &checkpoint.tensors)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let archive = read_archive(path)?;
    let meta: CheckpointMeta = serde_json::from_value(archive.meta)
        .map_err(|e| Error::Format(format!("{}: checkpoint metadata: {e}", path.display())))?;
    if meta.kind != CHECKPOINT_KIND {
        return Err(Error::Format(format!(
            "{}: not a checkpoint ({})",
            path.display(),
            meta.kind
        )));
    }
    Ok(Checkpoint {
        meta,
        tensors: archive.tensors,
    })
}

/// Loads checkpoint tensors into an existing model, which must have the same
/// architecture.
pub fn load_into(model: &mut Vae<f32>, path: &Path) -> Result<CheckpointMeta> {
    let ckpt = load_checkpoint(path)?;
    model.load_tensors(&ckpt.tensors)?;
    Ok(ckpt.meta)
}
