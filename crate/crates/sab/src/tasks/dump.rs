//! Dataset dumps: batches serialized in the shared manifest/blob layout
//! under the `SABDATA1` magic, for byte-exact comparison across runs and
//! implementations. Inputs flatten to `[batch, steps, n_input]`, targets
//! and masks to `[batch, steps]` (regression targets to `[batch, 1]`).

use std::path::Path;

use crate::blobfile::{self, DATASET_MAGIC};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{Batch, Targets};

pub fn dump_batches(path: &Path, batches: &[Batch], meta: serde_json::Value) -> Result<()> {
    let mut tensors = Vec::new();
    for (i, batch) in batches.iter().enumerate() {
        let t = batch.steps();
        let b = batch.batch_size();
        let n = batch.inputs[0].cols();

        let mut flat = vec![0.0; b * t * n];
        for (step, x) in batch.inputs.iter().enumerate() {
            for e in 0..b {
                let src = x.row(e);
                flat[(e * t + step) * n..(e * t + step + 1) * n].copy_from_slice(src);
            }
        }
        tensors.push((
            format!("batch{i}.inputs"),
            Tensor::new(vec![b, t, n], flat),
        ));

        match &batch.targets {
            Targets::Classes(c) => {
                let mut flat = vec![0.0; b * t];
                for (step, row) in c.iter().enumerate() {
                    for e in 0..b {
                        flat[e * t + step] = row[e] as f64;
                    }
                }
                tensors.push((format!("batch{i}.classes"), Tensor::new(vec![b, t], flat)));
            }
            Targets::Regression(r) => {
                tensors.push((format!("batch{i}.regression"), r.clone()));
            }
        }

        let mut flat = vec![0.0; b * t];
        for (step, row) in batch.loss_mask.iter().enumerate() {
            for e in 0..b {
                flat[e * t + step] = if row[e] { 1.0 } else { 0.0 };
            }
        }
        tensors.push((format!("batch{i}.mask"), Tensor::new(vec![b, t], flat)));
    }
    let mut meta = meta;
    meta["batches"] = serde_json::json!(batches.len());
    blobfile::save(path, DATASET_MAGIC, &tensors, meta)
}

pub fn load_batches(path: &Path) -> Result<(Vec<Batch>, serde_json::Value)> {
    let (manifest, tensors) = blobfile::load(path, DATASET_MAGIC)?;
    let count = manifest.meta["batches"].as_u64().ok_or_else(|| Error::Format {
        path: path.display().to_string(),
        offset: 0,
        msg: "missing batch count".into(),
    })? as usize;

    let find = |name: &str| -> Option<&Tensor> {
        tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    };

    let mut batches = Vec::with_capacity(count);
    for i in 0..count {
        let inputs_flat = find(&format!("batch{i}.inputs")).ok_or_else(|| Error::Format {
            path: path.display().to_string(),
            offset: 0,
            msg: format!("missing batch{i}.inputs"),
        })?;
        let shape = inputs_flat.shape().to_vec();
        let (b, t, n) = (shape[0], shape[1], shape[2]);

        let mut inputs = Vec::with_capacity(t);
        for step in 0..t {
            let mut slab = vec![0.0; b * n];
            for e in 0..b {
                let src = &inputs_flat.data()[(e * t + step) * n..(e * t + step + 1) * n];
                slab[e * n..(e + 1) * n].copy_from_slice(src);
            }
            inputs.push(Tensor::new(vec![b, n], slab));
        }

        let targets = if let Some(c) = find(&format!("batch{i}.classes")) {
            let mut classes = vec![vec![0usize; b]; t];
            for e in 0..b {
                for step in 0..t {
                    classes[step][e] = c.data()[e * t + step] as usize;
                }
            }
            Targets::Classes(classes)
        } else if let Some(r) = find(&format!("batch{i}.regression")) {
            Targets::Regression(r.clone())
        } else {
            return Err(Error::Format {
                path: path.display().to_string(),
                offset: 0,
                msg: format!("batch{i} has no targets"),
            });
        };

        let m = find(&format!("batch{i}.mask")).ok_or_else(|| Error::Format {
            path: path.display().to_string(),
            offset: 0,
            msg: format!("missing batch{i}.mask"),
        })?;
        let mut loss_mask = vec![vec![false; b]; t];
        for e in 0..b {
            for step in 0..t {
                loss_mask[step][e] = m.data()[e * t + step] != 0.0;
            }
        }

        let batch = Batch {
            inputs,
            targets,
            loss_mask,
        };
        batch.validate();
        batches.push(batch);
    }
    Ok((batches, manifest.meta))
}
