//! Adding task: sum the two marked entries of a value sequence.
//!
//! Each element is `T` steps of two input channels: uniform values in
//! [0, 1) and a binary mask with exactly one 1 in each half. The target
//! is the sum of the two masked values, read at the final step only.

use crate::rng::Rng;
use crate::tensor::Tensor;

use super::{Batch, Targets};

#[derive(Clone, Copy, Debug)]
pub struct AddingConfig {
    pub t_len: usize,
}

pub fn gen_adding(seed: u64, config: &AddingConfig, batch_size: usize) -> Batch {
    let t = config.t_len;
    assert!(t >= 2);
    let half = t / 2;

    let mut values = vec![vec![0.0f64; t]; batch_size];
    let mut marks = vec![(0usize, 0usize); batch_size];
    for b in 0..batch_size {
        let mut rng = Rng::stream(seed, b as u64);
        for v in &mut values[b] {
            *v = rng.uniform();
        }
        let first = rng.below(half as u64) as usize;
        let second = half + rng.below((t - half) as u64) as usize;
        marks[b] = (first, second);
    }

    let mut inputs = Vec::with_capacity(t);
    for pos in 0..t {
        let mut slab = vec![0.0; batch_size * 2];
        for b in 0..batch_size {
            slab[b * 2] = values[b][pos];
            let (i, j) = marks[b];
            slab[b * 2 + 1] = if pos == i || pos == j { 1.0 } else { 0.0 };
        }
        inputs.push(Tensor::new(vec![batch_size, 2], slab));
    }

    let targets: Vec<f64> = (0..batch_size)
        .map(|b| {
            let (i, j) = marks[b];
            values[b][i] + values[b][j]
        })
        .collect();
    let mut loss_mask = vec![vec![false; batch_size]; t];
    loss_mask[t - 1] = vec![true; batch_size];

    let batch = Batch {
        inputs,
        targets: Targets::Regression(Tensor::new(vec![batch_size, 1], targets)),
        loss_mask,
    };
    batch.validate();
    batch
}
