//! Copying memory task: remember ten digits across a long blank gap.
//!
//! A sequence has `T + 20` positions: ten digits drawn from 1..=8, `T`
//! blanks, one end-of-sequence marker, then nine more blanks. The target
//! is blank everywhere except the final ten positions, which must
//! reproduce the opening digits. All positions carry loss; the final ten
//! are also tracked separately since they are the hard part.

use crate::rng::Rng;
use crate::tensor::Tensor;

use super::{Batch, Targets};

pub const BLANK: usize = 0;
pub const MARKER: usize = 9;
pub const N_DIGITS: usize = 10;
/// One-hot input width: blank, digits 1..=8, marker.
pub const COPY_INPUT_DIM: usize = 10;
/// Output classes: blank plus the eight digits. The marker is never a
/// prediction target.
pub const COPY_CLASSES: usize = 9;

#[derive(Clone, Copy, Debug)]
pub struct CopyingConfig {
    /// Blank-gap length; the sequence is `T + 20` long.
    pub t_gap: usize,
}

impl CopyingConfig {
    pub fn sequence_len(&self) -> usize {
        self.t_gap + 20
    }
}

/// Element `b` draws from stream `b` of `seed`, so a batch is a pure
/// function of `(seed, config, batch_size)`.
pub fn gen_copying(seed: u64, config: &CopyingConfig, batch_size: usize) -> Batch {
    assert!(config.t_gap >= 1);
    let len = config.sequence_len();
    let t = config.t_gap;

    // symbols[b][pos]
    let mut symbols = vec![vec![BLANK; len]; batch_size];
    let mut digits = vec![vec![0usize; N_DIGITS]; batch_size];
    for b in 0..batch_size {
        let mut rng = Rng::stream(seed, b as u64);
        for d in 0..N_DIGITS {
            let digit = 1 + rng.below(8) as usize;
            digits[b][d] = digit;
            symbols[b][d] = digit;
        }
        symbols[b][t + 10] = MARKER;
    }

    let mut inputs = Vec::with_capacity(len);
    let mut classes = Vec::with_capacity(len);
    for pos in 0..len {
        let mut slab = vec![0.0; batch_size * COPY_INPUT_DIM];
        let mut step_targets = vec![BLANK; batch_size];
        for b in 0..batch_size {
            slab[b * COPY_INPUT_DIM + symbols[b][pos]] = 1.0;
            if pos >= t + 10 {
                step_targets[b] = digits[b][pos - (t + 10)];
            }
        }
        inputs.push(Tensor::new(vec![batch_size, COPY_INPUT_DIM], slab));
        classes.push(step_targets);
    }

    let batch = Batch {
        inputs,
        targets: Targets::Classes(classes),
        loss_mask: vec![vec![true; batch_size]; len],
    };
    batch.validate();
    batch
}

/// Positions whose targets are the copied digits: the final ten steps.
pub fn answer_window(config: &CopyingConfig) -> std::ops::Range<usize> {
    config.t_gap + 10..config.t_gap + 20
}
