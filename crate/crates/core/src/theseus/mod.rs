//! Progressive module replacement: a frozen predecessor whose layer groups are
//! stochastically swapped for compact successor modules during training.

mod hybrid;
mod map;
mod schedule;

pub use hybrid::{assemble_successor, build_hybrid, HybridModel, ModulePair, Phase};
pub use map::{CompressionMap, SuccessorInit};
pub use schedule::{
    equivalent_lr, sample_mask, slope_reaching, ReplacementMask, ReplacementScheduler,
};
