//! Checkpoints: a `SABCKPT1` manifest plus a raw f64 blob holding the
//! parameters and optimizer moments. Macrostates and retained graphs are
//! not checkpointed; training resumes at a sequence boundary, where they
//! are empty, so a resumed run is bit-identical to an uninterrupted one.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::blobfile::{self, CHECKPOINT_MAGIC};
use crate::error::{Error, Result};
use crate::nn::AdamState;
use crate::tensor::Tensor;
use crate::train::{Counters, TrainConfig, Trainer};

#[derive(Serialize, Deserialize, Debug, Clone)]
struct CheckpointMeta {
    counters: Counters,
    adam_step: u64,
    config: TrainConfig,
}

pub fn save(trainer: &Trainer, path: &Path) -> Result<()> {
    let mut tensors: Vec<(String, Tensor)> = Vec::new();
    for (_, name, t) in trainer.params.iter() {
        tensors.push((name.to_string(), t.clone()));
    }
    for (i, (_, name, _)) in trainer.params.iter().enumerate() {
        tensors.push((format!("adam.m.{name}"), trainer.adam.m[i].clone()));
    }
    for (i, (_, name, _)) in trainer.params.iter().enumerate() {
        tensors.push((format!("adam.v.{name}"), trainer.adam.v[i].clone()));
    }
    let meta = CheckpointMeta {
        counters: trainer.counters,
        adam_step: trainer.adam.t,
        config: trainer.config.clone(),
    };
    let meta = serde_json::to_value(&meta)
        .map_err(|e| Error::Internal(format!("checkpoint meta: {e}")))?;
    blobfile::save(path, CHECKPOINT_MAGIC, &tensors, meta)
}

/// Rebuild a trainer from a checkpoint. The stored config defines the
/// model; every parameter and moment tensor must match it by name and
/// shape.
pub fn load(path: &Path) -> Result<Trainer> {
    let (manifest, tensors) = blobfile::load(path, CHECKPOINT_MAGIC)?;
    let meta: CheckpointMeta =
        serde_json::from_value(manifest.meta.clone()).map_err(|e| Error::Format {
            path: path.display().to_string(),
            offset: 0,
            msg: format!("checkpoint meta: {e}"),
        })?;
    let mut trainer = Trainer::new(meta.config)?;

    let lookup = |name: &str| -> Result<&Tensor> {
        tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Format {
                path: path.display().to_string(),
                offset: 0,
                msg: format!("checkpoint missing tensor {name:?}"),
            })
    };

    let ids: Vec<(crate::tensor::ParamId, String)> = trainer
        .params
        .iter()
        .map(|(id, name, _)| (id, name.to_string()))
        .collect();
    for (id, name) in &ids {
        let t = lookup(name)?;
        if t.shape() != trainer.params.get(*id).shape() {
            return Err(Error::Format {
                path: path.display().to_string(),
                offset: 0,
                msg: format!(
                    "tensor {name:?} has shape {:?}, expected {:?}",
                    t.shape(),
                    trainer.params.get(*id).shape()
                ),
            });
        }
        trainer.params.set(*id, t.clone());
    }
    let mut adam = AdamState::new(&trainer.params);
    for (i, (_, name)) in ids.iter().enumerate() {
        adam.m[i] = lookup(&format!("adam.m.{name}"))?.clone();
        adam.v[i] = lookup(&format!("adam.v.{name}"))?.clone();
    }
    adam.t = meta.adam_step;
    trainer.adam = adam;
    trainer.counters = meta.counters;
    Ok(trainer)
}
