//! Optimization, evaluation, and the three training stages.

mod adam;
mod eval;
mod metrics;
mod train;

pub use adam::AdamState;
pub use eval::{evaluate, Classifier, EvalResult, MaskedHybrid, EVAL_BATCH};
pub use metrics::{MetricRecord, RunMetrics};
pub use train::{
    compress, early_stop, finetune_successor, train_predecessor, EarlyStop, Snapshot, Stage,
    TrainConfig, TrainOutcome,
};
