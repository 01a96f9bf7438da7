//! Task sources and padded batching.

mod batch;
mod synthetic;
mod tsv;
mod vocab;

pub use batch::{batches, epoch_seed, Batch, Batches};
pub use synthetic::{
    generate_synthetic, is_balanced, keyed_label, majority_label, SyntheticSpec, SyntheticTask,
    CLOSE_ID, FIRST_TASK_ID, OPEN_ID,
};
pub use tsv::{load_tsv, TsvSplit};
pub use vocab::{Vocab, PAD_ID, RESERVED, START_ID, UNK_ID};

/// One classification example (content tokens, without the sequence-start token).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub tokens: Vec<usize>,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Vec<Example>,
    pub dev: Vec<Example>,
    pub test: Vec<Example>,
    pub n_classes: usize,
    pub vocab_size: usize,
}
