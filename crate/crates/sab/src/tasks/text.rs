//! Character-level corpus loaders for next-character prediction.
//!
//! The byte vocabulary is built from the training split only (sorted byte
//! order, so it is deterministic); characters outside it map to a
//! reserved unknown index. Sequences are non-overlapping fixed-length
//! windows; the target at each position is the next character.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{Batch, Targets};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CorpusKind {
    /// Three distributed files: `ptb.train.txt`, `ptb.valid.txt`,
    /// `ptb.test.txt` under the given directory.
    Ptb,
    /// One contiguous file split 90%/5%/5% by character count, which on
    /// the canonical 100M-character file gives 90M/5M/5M.
    Text8,
}

impl CorpusKind {
    /// Window length: 100 for the treebank corpus, 180 for text8.
    pub fn window(&self) -> usize {
        match self {
            CorpusKind::Ptb => 100,
            CorpusKind::Text8 => 180,
        }
    }

    /// Conventional batch size: 32 for the treebank corpus, 64 for text8.
    pub fn batch_size(&self) -> usize {
        match self {
            CorpusKind::Ptb => 32,
            CorpusKind::Text8 => 64,
        }
    }
}

pub struct CharCorpus {
    pub train: Vec<u8>,
    pub valid: Vec<u8>,
    pub test: Vec<u8>,
    /// Sorted bytes present in the training split; index in this list is
    /// the class index.
    pub vocab: Vec<u8>,
    byte_to_index: [Option<u16>; 256],
}

impl CharCorpus {
    /// Classes including the reserved unknown slot.
    pub fn n_classes(&self) -> usize {
        self.vocab.len() + 1
    }

    pub fn unknown_index(&self) -> usize {
        self.vocab.len()
    }

    pub fn encode_byte(&self, b: u8) -> usize {
        match self.byte_to_index[b as usize] {
            Some(i) => i as usize,
            None => self.unknown_index(),
        }
    }

    pub fn encode(&self, text: &[u8]) -> Vec<usize> {
        text.iter().map(|&b| self.encode_byte(b)).collect()
    }

    /// Inverse of `encode` for known indices; the unknown index has no
    /// byte and decodes to `None`.
    pub fn decode(&self, indices: &[usize]) -> Option<Vec<u8>> {
        indices
            .iter()
            .map(|&i| self.vocab.get(i).copied())
            .collect()
    }

    pub fn split(&self, name: &str) -> &[u8] {
        match name {
            "train" => &self.train,
            "valid" => &self.valid,
            _ => &self.test,
        }
    }

    /// Non-overlapping windows of `len` inputs (each window consumes
    /// `len + 1` characters so every input has a next-character target).
    pub fn window_count(&self, split: &[u8], len: usize) -> usize {
        if split.len() < len + 1 {
            0
        } else {
            (split.len() - 1) / len
        }
    }

    /// Batch of consecutive windows `first..first + batch` from a split.
    pub fn batch(&self, split: &[u8], window_len: usize, first: usize, batch: usize) -> Batch {
        let n_classes = self.n_classes();
        let mut inputs = Vec::with_capacity(window_len);
        let mut classes = vec![vec![0usize; batch]; window_len];
        for pos in 0..window_len {
            let mut slab = vec![0.0; batch * n_classes];
            for w in 0..batch {
                let start = (first + w) * window_len;
                let c_in = self.encode_byte(split[start + pos]);
                let c_next = self.encode_byte(split[start + pos + 1]);
                slab[w * n_classes + c_in] = 1.0;
                classes[pos][w] = c_next;
            }
            inputs.push(Tensor::new(vec![batch, n_classes], slab));
        }
        let b = Batch {
            inputs,
            targets: Targets::Classes(classes),
            loss_mask: vec![vec![true; batch]; window_len],
        };
        b.validate();
        b
    }
}

fn build(train: Vec<u8>, valid: Vec<u8>, test: Vec<u8>) -> CharCorpus {
    let mut present = [false; 256];
    for &b in &train {
        present[b as usize] = true;
    }
    let vocab: Vec<u8> = (0..=255u8).filter(|&b| present[b as usize]).collect();
    let mut byte_to_index = [None; 256];
    for (i, &b) in vocab.iter().enumerate() {
        byte_to_index[b as usize] = Some(i as u16);
    }
    CharCorpus {
        train,
        valid,
        test,
        vocab,
        byte_to_index,
    }
}

/// Load a corpus. For `Ptb`, `path` is the directory holding the three
/// distributed files; for `Text8`, the single corpus file.
pub fn load_char_corpus(path: &Path, kind: CorpusKind) -> Result<CharCorpus> {
    let read = |p: &Path| -> Result<Vec<u8>> {
        fs::read(p).map_err(|e| Error::io(p.display().to_string(), e))
    };
    match kind {
        CorpusKind::Ptb => {
            let train = read(&path.join("ptb.train.txt"))?;
            let valid = read(&path.join("ptb.valid.txt"))?;
            let test = read(&path.join("ptb.test.txt"))?;
            Ok(build(train, valid, test))
        }
        CorpusKind::Text8 => {
            let all = read(path)?;
            let n = all.len();
            let train_end = n / 100 * 90;
            let valid_end = train_end + n / 100 * 5;
            let train = all[..train_end].to_vec();
            let valid = all[train_end..valid_end].to_vec();
            let test = all[valid_end..].to_vec();
            Ok(build(train, valid, test))
        }
    }
}
