//! IDX-format MNIST loader. Images become length-784 scalar sequences in
//! row-major scanline order, scaled to [0, 1]; the label is predicted at
//! the final step.

use std::fs;
use std::path::Path;

use byteorder::{BigEndian, ByteOrder};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{Batch, Targets};

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug)]
pub struct MnistData {
    /// Pixel sequences, each `rows * cols` values in [0, 1].
    pub images: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub rows: usize,
    pub cols: usize,
}

impl MnistData {
    pub fn sequence_len(&self) -> usize {
        self.rows * self.cols
    }

    /// Last `n` examples as a held-out split; the remainder trains.
    pub fn split_tail(&self, n: usize) -> (MnistView<'_>, MnistView<'_>) {
        let cut = self.images.len().saturating_sub(n);
        (
            MnistView {
                data: self,
                range: 0..cut,
            },
            MnistView {
                data: self,
                range: cut..self.images.len(),
            },
        )
    }
}

pub struct MnistView<'a> {
    pub data: &'a MnistData,
    pub range: std::ops::Range<usize>,
}

impl MnistView<'_> {
    pub fn len(&self) -> usize {
        self.range.len()
    }

    pub fn is_empty(&self) -> bool {
        self.range.is_empty()
    }

    /// Batch of the examples at `indices` (relative to this view).
    pub fn batch(&self, indices: &[usize]) -> Batch {
        let d = self.data;
        let t = d.sequence_len();
        let b = indices.len();
        let mut inputs = Vec::with_capacity(t);
        for pos in 0..t {
            let mut slab = vec![0.0; b];
            for (row, &i) in indices.iter().enumerate() {
                slab[row] = d.images[self.range.start + i][pos];
            }
            inputs.push(Tensor::new(vec![b, 1], slab));
        }
        let mut classes = vec![vec![0usize; b]; t];
        for (row, &i) in indices.iter().enumerate() {
            classes[t - 1][row] = d.labels[self.range.start + i];
        }
        let mut loss_mask = vec![vec![false; b]; t];
        loss_mask[t - 1] = vec![true; b];
        let batch = Batch {
            inputs,
            targets: Targets::Classes(classes),
            loss_mask,
        };
        batch.validate();
        batch
    }
}

fn read_u32(path: &str, raw: &[u8], offset: usize) -> Result<u32> {
    if offset + 4 > raw.len() {
        return Err(Error::Format {
            path: path.into(),
            offset: raw.len() as u64,
            msg: format!("truncated: need 4 bytes at offset {offset}"),
        });
    }
    Ok(BigEndian::read_u32(&raw[offset..offset + 4]))
}

/// Parse the big-endian IDX pair (images magic 0x00000803, labels magic
/// 0x00000801). Counts must agree between the two files.
pub fn load_mnist_idx(images_path: &Path, labels_path: &Path) -> Result<MnistData> {
    let ipath = images_path.display().to_string();
    let iraw = fs::read(images_path).map_err(|e| Error::io(&*ipath, e))?;
    let magic = read_u32(&ipath, &iraw, 0)?;
    if magic != IMAGES_MAGIC {
        return Err(Error::Format {
            path: ipath,
            offset: 0,
            msg: format!("bad images magic {magic:#010x}, expected {IMAGES_MAGIC:#010x}"),
        });
    }
    let count = read_u32(&ipath, &iraw, 4)? as usize;
    let rows = read_u32(&ipath, &iraw, 8)? as usize;
    let cols = read_u32(&ipath, &iraw, 12)? as usize;
    let per = rows * cols;
    let need = 16 + count * per;
    if iraw.len() < need {
        return Err(Error::Format {
            path: ipath,
            offset: iraw.len() as u64,
            msg: format!("truncated: {count} images of {per} bytes need {need} bytes"),
        });
    }
    let images: Vec<Vec<f64>> = (0..count)
        .map(|i| {
            iraw[16 + i * per..16 + (i + 1) * per]
                .iter()
                .map(|&b| b as f64 / 255.0)
                .collect()
        })
        .collect();

    let lpath = labels_path.display().to_string();
    let lraw = fs::read(labels_path).map_err(|e| Error::io(&*lpath, e))?;
    let magic = read_u32(&lpath, &lraw, 0)?;
    if magic != LABELS_MAGIC {
        return Err(Error::Format {
            path: lpath,
            offset: 0,
            msg: format!("bad labels magic {magic:#010x}, expected {LABELS_MAGIC:#010x}"),
        });
    }
    let lcount = read_u32(&lpath, &lraw, 4)? as usize;
    if lcount != count {
        return Err(Error::Format {
            path: lpath,
            offset: 4,
            msg: format!("label count {lcount} != image count {count}"),
        });
    }
    if lraw.len() < 8 + count {
        return Err(Error::Format {
            path: lpath,
            offset: lraw.len() as u64,
            msg: format!("truncated: {count} labels need {} bytes", 8 + count),
        });
    }
    let labels: Vec<usize> = lraw[8..8 + count].iter().map(|&b| b as usize).collect();
    if let Some(&bad) = labels.iter().find(|&&l| l > 9) {
        return Err(Error::Format {
            path: lpath,
            offset: 8,
            msg: format!("label {bad} out of range 0..=9"),
        });
    }

    Ok(MnistData {
        images,
        labels,
        rows,
        cols,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_idx_pair(
        dir: &Path,
        count: usize,
        rows: usize,
        cols: usize,
        pixel: impl Fn(usize, usize) -> u8,
        label: impl Fn(usize) -> u8,
    ) -> (std::path::PathBuf, std::path::PathBuf) {
        let ipath = dir.join("images.idx");
        let lpath = dir.join("labels.idx");
        let mut f = fs::File::create(&ipath).unwrap();
        for v in [IMAGES_MAGIC, count as u32, rows as u32, cols as u32] {
            f.write_all(&v.to_be_bytes()).unwrap();
        }
        for i in 0..count {
            for p in 0..rows * cols {
                f.write_all(&[pixel(i, p)]).unwrap();
            }
        }
        let mut f = fs::File::create(&lpath).unwrap();
        for v in [LABELS_MAGIC, count as u32] {
            f.write_all(&v.to_be_bytes()).unwrap();
        }
        for i in 0..count {
            f.write_all(&[label(i)]).unwrap();
        }
        (ipath, lpath)
    }

    #[test]
    fn canonical_headers_are_accepted() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = write_idx_pair(dir.path(), 3, 28, 28, |i, p| ((i + p) % 256) as u8, |i| {
            (i % 10) as u8
        });
        let d = load_mnist_idx(&ip, &lp).unwrap();
        assert_eq!(d.images.len(), 3);
        assert_eq!(d.sequence_len(), 784);
        assert_eq!(d.labels, vec![0, 1, 2]);
        assert!((d.images[1][0] - 1.0 / 255.0).abs() < 1e-15);
    }

    #[test]
    fn all_zero_image_maps_to_all_zero_sequence() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = write_idx_pair(dir.path(), 1, 4, 4, |_, _| 0, |_| 5);
        let d = load_mnist_idx(&ip, &lp).unwrap();
        assert!(d.images[0].iter().all(|&v| v == 0.0));
        let (_, tail) = d.split_tail(1);
        let batch = tail.batch(&[0]);
        assert_eq!(batch.steps(), 16);
        assert!(batch.inputs.iter().all(|x| x.at(0, 0) == 0.0));
    }

    #[test]
    fn wrong_magic_is_rejected_with_offset() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = write_idx_pair(dir.path(), 1, 2, 2, |_, _| 0, |_| 0);
        let mut raw = fs::read(&ip).unwrap();
        raw[3] = 0x05;
        fs::write(&ip, raw).unwrap();
        match load_mnist_idx(&ip, &lp) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn truncated_images_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = write_idx_pair(dir.path(), 2, 3, 3, |_, _| 7, |_| 1);
        let raw = fs::read(&ip).unwrap();
        fs::write(&ip, &raw[..raw.len() - 4]).unwrap();
        assert!(matches!(
            load_mnist_idx(&ip, &lp),
            Err(Error::Format { .. })
        ));
    }
}
