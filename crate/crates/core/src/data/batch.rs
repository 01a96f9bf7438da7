use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::vocab::{PAD_ID, START_ID};
use super::Example;
use crate::tensor::AttnMask;

/// A padded minibatch. `tokens` is row-major `[batch × seq]`.
#[derive(Debug, Clone)]
pub struct Batch {
    pub tokens: Vec<usize>,
    pub mask: AttnMask,
    pub labels: Vec<usize>,
}

impl Batch {
    /// Prepends the sequence-start token to each example, truncates to `max_len`,
    /// and pads to the longest row.
    pub fn from_examples(examples: &[&Example], max_len: usize) -> Batch {
        let rows: Vec<Vec<usize>> = examples
            .iter()
            .map(|e| {
                let mut r = Vec::with_capacity(e.tokens.len() + 1);
                r.push(START_ID);
                r.extend_from_slice(&e.tokens);
                r.truncate(max_len.max(1));
                r
            })
            .collect();
        let seq = rows.iter().map(Vec::len).max().unwrap_or(1);
        let mut tokens = Vec::with_capacity(rows.len() * seq);
        let mut keep = Vec::with_capacity(rows.len() * seq);
        for r in &rows {
            for j in 0..seq {
                match r.get(j) {
                    Some(&t) => {
                        tokens.push(t);
                        keep.push(true);
                    }
                    None => {
                        tokens.push(PAD_ID);
                        keep.push(false);
                    }
                }
            }
        }
        Batch {
            tokens,
            mask: AttnMask::new(rows.len(), seq, keep).expect("mask sized from rows"),
            labels: examples.iter().map(|e| e.label).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn seq(&self) -> usize {
        self.mask.seq()
    }
}

/// Mixes a run seed and an epoch index into an independent shuffle seed.
pub fn epoch_seed(seed: u64, epoch: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ epoch.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// One epoch of minibatches; the final short batch is kept.
pub struct Batches<'a> {
    examples: &'a [Example],
    order: Vec<usize>,
    batch_size: usize,
    max_len: usize,
    cursor: usize,
}

impl Iterator for Batches<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.cursor >= self.order.len() {
            return None;
        }
        let end = (self.cursor + self.batch_size).min(self.order.len());
        let picked: Vec<&Example> = self.order[self.cursor..end]
            .iter()
            .map(|&i| &self.examples[i])
            .collect();
        self.cursor = end;
        Some(Batch::from_examples(&picked, self.max_len))
    }
}

/// Batches `examples` in order, or in a seeded shuffled order when `shuffle_seed` is set.
///
/// Panics if `batch_size` is zero.
pub fn batches(
    examples: &[Example],
    batch_size: usize,
    max_len: usize,
    shuffle_seed: Option<u64>,
) -> Batches<'_> {
    assert!(batch_size >= 1, "batch_size must be >= 1");
    let mut order: Vec<usize> = (0..examples.len()).collect();
    if let Some(seed) = shuffle_seed {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    Batches {
        examples,
        order,
        batch_size,
        max_len,
        cursor: 0,
    }
}
