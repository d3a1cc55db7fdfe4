//! Benchmark tasks: synthetic generators (copying, adding), the
//! pixel-sequence MNIST loader, and character-corpus loaders, all
//! producing uniform [`Batch`] records addressed by (epoch, index) so a
//! resumed run sees exactly the data an uninterrupted run would.

mod adding;
mod copying;
mod dump;
mod mnist;
mod text;

pub use adding::{gen_adding, AddingConfig};
pub use copying::{answer_window, gen_copying, CopyingConfig, COPY_CLASSES, COPY_INPUT_DIM};
pub use dump::{dump_batches, load_batches};
pub use mnist::{load_mnist_idx, MnistData};
pub use text::{load_char_corpus, CharCorpus, CorpusKind};

use crate::rng::Rng;
use crate::tensor::Tensor;

/// Which loss a task trains under.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    SoftmaxCrossEntropy,
    MeanSquaredError,
}

/// Targets for one batch, time-major where per-step.
#[derive(Clone, Debug, PartialEq)]
pub enum Targets {
    /// Class index per step and element: `[step][element]`.
    Classes(Vec<Vec<usize>>),
    /// One regression value per element, read at the masked step.
    Regression(Tensor),
}

/// One batch of sequences. Inputs are stored time-major: `inputs[t]` is
/// the `[batch, n_input]` slab for step t.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub inputs: Vec<Tensor>,
    pub targets: Targets,
    /// `loss_mask[t][b]`: does step t of element b contribute to the loss.
    pub loss_mask: Vec<Vec<bool>>,
}

impl Batch {
    pub fn steps(&self) -> usize {
        self.inputs.len()
    }

    pub fn batch_size(&self) -> usize {
        if self.inputs.is_empty() {
            0
        } else {
            self.inputs[0].rows()
        }
    }

    pub fn loss_kind(&self) -> LossKind {
        match self.targets {
            Targets::Classes(_) => LossKind::SoftmaxCrossEntropy,
            Targets::Regression(_) => LossKind::MeanSquaredError,
        }
    }

    /// Check the cross-field invariants; used by generators and loaders.
    pub fn validate(&self) {
        let t = self.steps();
        let b = self.batch_size();
        assert_eq!(self.loss_mask.len(), t);
        for m in &self.loss_mask {
            assert_eq!(m.len(), b);
        }
        for x in &self.inputs {
            assert_eq!(x.rows(), b);
        }
        match &self.targets {
            Targets::Classes(c) => {
                assert_eq!(c.len(), t);
                for row in c {
                    assert_eq!(row.len(), b);
                }
            }
            Targets::Regression(r) => assert_eq!(r.shape(), [b, 1]),
        }
        for e in 0..b {
            assert!(
                (0..t).any(|s| self.loss_mask[s][e]),
                "element {e} has no masked step"
            );
        }
    }
}

/// Deterministic source of batches. Batch `(epoch, index)` is a pure
/// function of the source, so training can resume mid-run bit-exactly.
pub trait BatchSource {
    fn batch(&self, epoch: u64, index: u64) -> Batch;
    fn batches_per_epoch(&self) -> usize;
    fn n_input(&self) -> usize;
    fn n_out(&self) -> usize;
    fn loss_kind(&self) -> LossKind;
}

/// Derive an independent sub-seed; used to give every (epoch, batch) its
/// own generator streams.
pub fn derive_seed(seed: u64, epoch: u64, index: u64) -> u64 {
    let mut r = Rng::stream(seed, epoch.wrapping_mul(0x9E3779B97F4A7C15) ^ index);
    r.next_u64()
}

/// Copying task batches generated on demand.
pub struct CopyingSource {
    pub config: CopyingConfig,
    pub seed: u64,
    pub batch_size: usize,
    pub batches_per_epoch: usize,
}

impl BatchSource for CopyingSource {
    fn batch(&self, epoch: u64, index: u64) -> Batch {
        gen_copying(derive_seed(self.seed, epoch, index), &self.config, self.batch_size)
    }
    fn batches_per_epoch(&self) -> usize {
        self.batches_per_epoch
    }
    fn n_input(&self) -> usize {
        COPY_INPUT_DIM
    }
    fn n_out(&self) -> usize {
        COPY_CLASSES
    }
    fn loss_kind(&self) -> LossKind {
        LossKind::SoftmaxCrossEntropy
    }
}

/// Adding task batches generated on demand.
pub struct AddingSource {
    pub config: AddingConfig,
    pub seed: u64,
    pub batch_size: usize,
    pub batches_per_epoch: usize,
}

impl BatchSource for AddingSource {
    fn batch(&self, epoch: u64, index: u64) -> Batch {
        gen_adding(derive_seed(self.seed, epoch, index), &self.config, self.batch_size)
    }
    fn batches_per_epoch(&self) -> usize {
        self.batches_per_epoch
    }
    fn n_input(&self) -> usize {
        2
    }
    fn n_out(&self) -> usize {
        1
    }
    fn loss_kind(&self) -> LossKind {
        LossKind::MeanSquaredError
    }
}

/// Deterministic Fisher-Yates permutation of `0..n`.
pub fn permutation(rng: &mut Rng, n: usize) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.below(i as u64 + 1) as usize;
        p.swap(i, j);
    }
    p
}

/// Pixel-sequence batches over a slice of an MNIST dataset, reshuffled
/// deterministically every epoch.
pub struct MnistSource {
    pub data: std::sync::Arc<MnistData>,
    pub range: std::ops::Range<usize>,
    pub batch_size: usize,
    pub seed: u64,
}

impl BatchSource for MnistSource {
    fn batch(&self, epoch: u64, index: u64) -> Batch {
        let n = self.range.len();
        let mut rng = Rng::seeded(derive_seed(self.seed, epoch, u64::MAX));
        let perm = permutation(&mut rng, n);
        let start = index as usize * self.batch_size;
        let end = (start + self.batch_size).min(n);
        let view = MnistView {
            data: &self.data,
            range: self.range.clone(),
        };
        view.batch(&perm[start..end])
    }

    fn batches_per_epoch(&self) -> usize {
        self.range.len() / self.batch_size
    }

    fn n_input(&self) -> usize {
        1
    }

    fn n_out(&self) -> usize {
        10
    }

    fn loss_kind(&self) -> LossKind {
        LossKind::SoftmaxCrossEntropy
    }
}

pub use mnist::MnistView;

/// Next-character batches over non-overlapping windows of one corpus
/// split, taken in order.
pub struct CharSource {
    pub corpus: std::sync::Arc<CharCorpus>,
    pub split: &'static str,
    pub kind: CorpusKind,
    pub batch_size: usize,
}

impl BatchSource for CharSource {
    fn batch(&self, _epoch: u64, index: u64) -> Batch {
        let split = self.corpus.split(self.split);
        self.corpus.batch(
            split,
            self.kind.window(),
            index as usize * self.batch_size,
            self.batch_size,
        )
    }

    fn batches_per_epoch(&self) -> usize {
        self.corpus
            .window_count(self.corpus.split(self.split), self.kind.window())
            / self.batch_size
    }

    fn n_input(&self) -> usize {
        self.corpus.n_classes()
    }

    fn n_out(&self) -> usize {
        self.corpus.n_classes()
    }

    fn loss_kind(&self) -> LossKind {
        LossKind::SoftmaxCrossEntropy
    }
}
