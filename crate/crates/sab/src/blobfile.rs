//! Manifest + blob file pair: a magic-prefixed JSON manifest describing
//! named f64 tensors, and a sidecar blob of raw little-endian values
//! concatenated in manifest order. Checkpoints and dataset dumps share
//! this layout under different magic strings.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &str = "SABCKPT1";
pub const DATASET_MAGIC: &str = "SABDATA1";

#[derive(Serialize, Deserialize, Debug, Clone)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the blob in elements (not bytes).
    pub offset: usize,
    pub len: usize,
}

#[derive(Serialize, Deserialize, Debug, Clone)]
pub struct Manifest {
    pub version: u32,
    pub dtype: String,
    pub tensors: Vec<TensorEntry>,
    /// Format-specific payload: counters and config echo for checkpoints,
    /// task description for dataset dumps.
    pub meta: serde_json::Value,
}

/// Blob path for a given manifest path: same name with ".blob" appended.
pub fn blob_path(manifest: &Path) -> PathBuf {
    let mut os = manifest.as_os_str().to_os_string();
    os.push(".blob");
    PathBuf::from(os)
}

pub fn save(
    path: &Path,
    magic: &str,
    tensors: &[(String, Tensor)],
    meta: serde_json::Value,
) -> Result<()> {
    let mut entries = Vec::with_capacity(tensors.len());
    let mut offset = 0usize;
    for (name, t) in tensors {
        entries.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset,
            len: t.len(),
        });
        offset += t.len();
    }
    let manifest = Manifest {
        version: 1,
        dtype: "f64".into(),
        tensors: entries,
        meta,
    };

    let io = |e| Error::io(path.display().to_string(), e);
    let mut f = fs::File::create(path).map_err(io)?;
    f.write_all(magic.as_bytes()).map_err(io)?;
    f.write_all(b"\n").map_err(io)?;
    let body = serde_json::to_vec(&manifest)
        .map_err(|e| Error::Internal(format!("manifest serialization: {e}")))?;
    f.write_all(&body).map_err(io)?;

    let bpath = blob_path(path);
    let bio = |e| Error::io(bpath.display().to_string(), e);
    let mut blob = Vec::with_capacity(offset * 8);
    for (_, t) in tensors {
        for &v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(&bpath, blob).map_err(bio)?;
    Ok(())
}

pub fn load(path: &Path, magic: &str) -> Result<(Manifest, Vec<(String, Tensor)>)> {
    let pstr = path.display().to_string();
    let raw = fs::read(path).map_err(|e| Error::io(&*pstr, e))?;
    let header_len = magic.len() + 1;
    if raw.len() < header_len || &raw[..magic.len()] != magic.as_bytes() {
        return Err(Error::Format {
            path: pstr,
            offset: 0,
            msg: format!("bad magic, expected {magic:?}"),
        });
    }
    let manifest: Manifest = serde_json::from_slice(&raw[header_len..]).map_err(|e| Error::Format {
        path: pstr.clone(),
        offset: header_len as u64,
        msg: format!("manifest parse: {e}"),
    })?;
    if manifest.dtype != "f64" {
        return Err(Error::Format {
            path: pstr,
            offset: header_len as u64,
            msg: format!("unsupported dtype {:?}", manifest.dtype),
        });
    }

    let bpath = blob_path(path);
    let bstr = bpath.display().to_string();
    let blob = fs::read(&bpath).map_err(|e| Error::io(&*bstr, e))?;
    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    for entry in &manifest.tensors {
        let byte_start = entry.offset * 8;
        let byte_end = byte_start + entry.len * 8;
        if byte_end > blob.len() {
            return Err(Error::Format {
                path: bstr,
                offset: blob.len() as u64,
                msg: format!(
                    "blob truncated: tensor {:?} wants bytes {}..{}",
                    entry.name, byte_start, byte_end
                ),
            });
        }
        if entry.shape.iter().product::<usize>() != entry.len {
            return Err(Error::Format {
                path: pstr,
                offset: header_len as u64,
                msg: format!("tensor {:?}: shape/len mismatch", entry.name),
            });
        }
        let data: Vec<f64> = blob[byte_start..byte_end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push((entry.name.clone(), Tensor::new(entry.shape.clone(), data)));
    }
    Ok((manifest, tensors))
}
