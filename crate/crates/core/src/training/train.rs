use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::eval::{evaluate, EvalResult, MaskedHybrid};
use super::{AdamState, MetricRecord, RunMetrics};
use crate::checkpoint::Checkpoint;
use crate::data::{batches, epoch_seed, Batch, Dataset};
use crate::error::{Error, Result};
use crate::model::{Dropout, EncoderModel};
use crate::tensor::{Parameters, Tape, Var};
use crate::theseus::{
    build_hybrid, equivalent_lr, sample_mask, CompressionMap, HybridModel, ReplacementScheduler,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Predecessor,
    Compress,
    Finetune,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Predecessor => "predecessor",
            Stage::Compress => "compress",
            Stage::Finetune => "finetune",
        })
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "predecessor" => Ok(Stage::Predecessor),
            "compress" => Ok(Stage::Compress),
            "finetune" => Ok(Stage::Finetune),
            other => Err(Error::Config(format!("unknown stage {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub stage: Stage,
    pub batch_size: usize,
    /// Exactly one of `max_steps` and `max_epochs` must be set.
    pub max_steps: Option<u64>,
    pub max_epochs: Option<u64>,
    pub lr: f64,
    pub weight_decay: f64,
    pub eval_every: u64,
    pub patience: usize,
    pub seed: u64,
    /// Successor fine-tuning only: keep embeddings and head frozen.
    pub freeze_shared: bool,
}

impl TrainConfig {
    pub fn new(stage: Stage) -> Self {
        TrainConfig {
            stage,
            batch_size: 32,
            max_steps: Some(2000),
            max_epochs: None,
            lr: 1e-3,
            weight_decay: 0.0,
            eval_every: 200,
            patience: 5,
            seed: 0,
            freeze_shared: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.max_steps.is_some() == self.max_epochs.is_some() {
            return Err(Error::Config(
                "set exactly one of max_steps and max_epochs".into(),
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr {} must be positive", self.lr)));
        }
        if self.eval_every == 0 || self.patience == 0 {
            return Err(Error::Config("eval_every and patience must be >= 1".into()));
        }
        Ok(())
    }

    pub fn total_steps(&self, n_train: usize) -> u64 {
        match (self.max_steps, self.max_epochs) {
            (Some(s), _) => s,
            (None, Some(e)) => e * n_train.div_ceil(self.batch_size) as u64,
            (None, None) => 0,
        }
    }
}

/// Stop once `patience` evaluations pass without a strict improvement.
/// `best` is the index of the earliest maximum.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EarlyStop {
    pub stop: bool,
    pub best: usize,
}

pub fn early_stop(history: &[f64], patience: usize) -> EarlyStop {
    let mut best = 0;
    for (i, &v) in history.iter().enumerate() {
        if v > history[best] {
            best = i;
        }
    }
    let since = history.len().saturating_sub(1).saturating_sub(best);
    EarlyStop {
        stop: !history.is_empty() && since >= patience,
        best,
    }
}

/// Models the loop can snapshot when training diverges.
pub trait Snapshot {
    fn snapshot(&self) -> Checkpoint;
}

impl Snapshot for EncoderModel {
    fn snapshot(&self) -> Checkpoint {
        self.to_checkpoint()
    }
}

impl Snapshot for HybridModel {
    fn snapshot(&self) -> Checkpoint {
        self.to_checkpoint()
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<M> {
    /// Model at the best dev evaluation (the starting point counts as one).
    pub model: M,
    /// Model after the last step taken.
    pub last: M,
    pub metrics: RunMetrics,
    pub best_step: u64,
    pub best_dev: Option<EvalResult>,
    pub steps_run: u64,
}

/// Per-run settings that come from the model rather than the config.
struct LoopSpec<'a> {
    max_len: usize,
    dropout_rate: f64,
    /// Replacement rate logged at a given step, when replacing.
    rate: Option<&'a dyn Fn(u64) -> f64>,
}

fn fit<M, F, E>(
    mut model: M,
    data: &Dataset,
    cfg: &TrainConfig,
    spec: LoopSpec<'_>,
    mut forward: F,
    eval: E,
) -> Result<TrainOutcome<M>>
where
    M: Parameters + Clone + Snapshot,
    F: FnMut(&M, &mut Tape, &Batch, u64, &mut Dropout) -> Result<Var>,
    E: Fn(&M) -> Result<EvalResult>,
{
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(Error::Data("empty training split".into()));
    }
    let total = cfg.total_steps(data.train.len());
    let mut metrics = RunMetrics::new();
    if total == 0 {
        return Ok(TrainOutcome {
            last: model.clone(),
            model,
            metrics,
            best_step: 0,
            best_dev: None,
            steps_run: 0,
        });
    }

    let stage = cfg.stage.to_string();
    let clock = Instant::now();
    let record = |step: u64, split: &str, r: EvalResult| {
        let p_d = spec.rate.map(|f| f(step));
        MetricRecord {
            stage: stage.clone(),
            step,
            split: split.to_string(),
            loss: r.loss,
            accuracy: r.accuracy,
            p_d,
            lr_effective: p_d.map_or(cfg.lr, |p| equivalent_lr(cfg.lr, p)),
            wall_ms: clock.elapsed().as_millis() as u64,
        }
    };

    let mut adam = AdamState::new(cfg.lr).with_weight_decay(cfg.weight_decay);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    dropout_rng.set_stream(10);
    let mut dropout = Dropout::new(spec.dropout_rate, dropout_rng);

    let initial = eval(&model)?;
    metrics.push(record(0, "dev", initial))?;
    let mut history = vec![initial.accuracy];
    let mut best = (model.clone(), 0u64, initial);

    let (mut step, mut epoch) = (0u64, 0u64);
    let (mut win_loss, mut win_correct, mut win_n) = (0.0, 0usize, 0usize);
    'outer: loop {
        for batch in batches(
            &data.train,
            cfg.batch_size,
            spec.max_len,
            Some(epoch_seed(cfg.seed, epoch)),
        ) {
            let mut tape = Tape::new();
            let logits = forward(&model, &mut tape, &batch, step, &mut dropout)?;
            let loss = tape.cross_entropy(logits, &batch.labels)?;
            let loss_value = tape.value(loss)[0];
            if !loss_value.is_finite() {
                return Err(Error::Diverged {
                    step,
                    last_good: Box::new(best.0.snapshot()),
                });
            }
            let c = tape.shape(logits)[1];
            for (row, &label) in tape.value(logits).chunks_exact(c).zip(&batch.labels) {
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                win_correct += (row.iter().position(|&v| v == max) == Some(label)) as usize;
            }
            win_loss += loss_value * batch.len() as f64;
            win_n += batch.len();

            let grads = tape.backward(loss)?;
            drop(tape);
            model.zero_grad();
            grads.deposit_all(&mut model);
            adam.step(&mut model)?;
            step += 1;

            if step % cfg.eval_every == 0 || step == total {
                let train = EvalResult {
                    loss: win_loss / win_n as f64,
                    accuracy: win_correct as f64 / win_n as f64,
                };
                metrics.push(record(step, "train", train))?;
                (win_loss, win_correct, win_n) = (0.0, 0, 0);
                let dev = eval(&model)?;
                metrics.push(record(step, "dev", dev))?;
                if dev.accuracy > best.2.accuracy {
                    best = (model.clone(), step, dev);
                }
                history.push(dev.accuracy);
                if early_stop(&history, cfg.patience).stop {
                    break 'outer;
                }
            }
            if step == total {
                break 'outer;
            }
        }
        epoch += 1;
    }
    let (mut best_model, best_step, best_dev) = best;
    best_model.visit_mut(&mut |_, t| t.clear_grad());
    model.visit_mut(&mut |_, t| t.clear_grad());
    Ok(TrainOutcome {
        model: best_model,
        last: model,
        metrics,
        best_step,
        best_dev: Some(best_dev),
        steps_run: step,
    })
}

/// Supervised training of the full model; returns the best-dev checkpoint.
pub fn train_predecessor(
    model: EncoderModel,
    data: &Dataset,
    cfg: &TrainConfig,
) -> Result<TrainOutcome<EncoderModel>> {
    let spec = LoopSpec {
        max_len: model.config.max_seq_len,
        dropout_rate: model.config.dropout_rate,
        rate: None,
    };
    fit(
        model,
        data,
        cfg,
        spec,
        |m, tape, b, _, drop| m.forward(tape, &b.tokens, &b.mask, drop),
        |m| evaluate(m, &data.dev),
    )
}

/// Module-replacement training: one mask per batch at the scheduled rate,
/// Adam on the successor modules only. Dev accuracy is the successor's
/// (every module replaced).
pub fn compress(
    predecessor: &EncoderModel,
    data: &Dataset,
    map: &CompressionMap,
    sched: &ReplacementScheduler,
    cfg: &TrainConfig,
) -> Result<TrainOutcome<HybridModel>> {
    let hybrid = build_hybrid(predecessor, map)?;
    let n = hybrid.n_modules();
    let mut mask_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    mask_rng.set_stream(11);
    let rate = |t: u64| sched.rate(t);
    let spec = LoopSpec {
        max_len: predecessor.config.max_seq_len,
        dropout_rate: predecessor.config.dropout_rate,
        rate: Some(&rate),
    };
    fit(
        hybrid,
        data,
        cfg,
        spec,
        |h, tape, b, step, drop| {
            let p = sched.rate(step);
            assert!((0.0..=1.0).contains(&p), "scheduler emitted {p}");
            let r = sample_mask(n, p, step, &mut mask_rng)?;
            h.forward(tape, &b.tokens, &b.mask, &r, drop)
        },
        |h| evaluate(&MaskedHybrid::successor(h), &data.dev),
    )
}

/// Trains a standalone successor with every tensor trainable, unless
/// `cfg.freeze_shared` keeps embeddings and head fixed.
pub fn finetune_successor(
    mut successor: EncoderModel,
    data: &Dataset,
    cfg: &TrainConfig,
) -> Result<TrainOutcome<EncoderModel>> {
    successor.set_frozen(false);
    if cfg.freeze_shared {
        successor.embeddings.set_frozen(true);
        successor.head.set_frozen(true);
    }
    let spec = LoopSpec {
        max_len: successor.config.max_seq_len,
        dropout_rate: successor.config.dropout_rate,
        rate: None,
    };
    fit(
        successor,
        data,
        cfg,
        spec,
        |m, tape, b, _, drop| m.forward(tape, &b.tokens, &b.mask, drop),
        |m| evaluate(m, &data.dev),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticSpec, SyntheticTask};
    use crate::model::EncoderConfig;
    use crate::tensor::Tensor;
    use proptest::prelude::*;

    fn data() -> Dataset {
        generate_synthetic(&SyntheticSpec {
            task: SyntheticTask::MajorityToken,
            train: 64,
            dev: 32,
            test: 16,
            seq_len: 8,
            vocab_size: 12,
            n_classes: 2,
            seed: 1,
        })
        .unwrap()
    }

    fn model(layers: usize) -> EncoderModel {
        let cfg = EncoderConfig {
            vocab_size: 12,
            max_seq_len: 8,
            d_model: 8,
            n_heads: 2,
            d_ff: 16,
            n_layers: layers,
            n_classes: 2,
            dropout_rate: 0.1,
        };
        EncoderModel::init(&cfg, 3).unwrap()
    }

    fn cfg(stage: Stage, steps: u64) -> TrainConfig {
        TrainConfig {
            max_steps: Some(steps),
            eval_every: 5,
            batch_size: 8,
            patience: 100,
            lr: 1e-2,
            ..TrainConfig::new(stage)
        }
    }

    #[test]
    fn early_stop_examples() {
        assert_eq!(
            early_stop(&[1.0, 2.0, 3.0], 2),
            EarlyStop {
                stop: false,
                best: 2
            }
        );
        assert_eq!(
            early_stop(&[3.0, 2.0, 2.0, 2.0], 3),
            EarlyStop {
                stop: true,
                best: 0
            }
        );
        assert_eq!(
            early_stop(&[1.0, 2.0, 2.0, 3.0], 2),
            EarlyStop {
                stop: false,
                best: 3
            }
        );
        assert_eq!(
            early_stop(&[1.0, 1.0, 1.0], 2),
            EarlyStop {
                stop: true,
                best: 0
            }
        );
    }

    proptest! {
        #[test]
        fn early_stop_matches_definition(history in proptest::collection::vec(0u8..4, 1..12), patience in 1usize..5) {
            let h: Vec<f64> = history.iter().map(|&v| v as f64).collect();
            let r = early_stop(&h, patience);
            let max = h.iter().cloned().fold(f64::MIN, f64::max);
            prop_assert_eq!(r.best, h.iter().position(|&v| v == max).unwrap());
            prop_assert_eq!(r.stop, h.len() - 1 - r.best >= patience);
        }
    }

    #[test]
    fn config_needs_exactly_one_stopping_rule() {
        let mut c = TrainConfig::new(Stage::Predecessor);
        c.max_epochs = Some(1);
        assert!(c.validate().is_err());
        c.max_steps = None;
        assert!(c.validate().is_ok());
        assert_eq!(c.total_steps(65), 3);
        c.batch_size = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn zero_steps_returns_initial_model() {
        let m = model(2);
        let out = train_predecessor(m.clone(), &data(), &cfg(Stage::Predecessor, 0)).unwrap();
        assert_eq!(out.model, m);
        assert_eq!(out.last, m);
        assert!(out.metrics.is_empty());
    }

    #[test]
    fn last_model_is_the_final_step() {
        let d = data();
        let c = cfg(Stage::Predecessor, 12);
        let full = train_predecessor(model(2), &d, &c).unwrap();
        assert_eq!(full.steps_run, 12);
        let again = train_predecessor(model(2), &d, &c).unwrap();
        assert_eq!(again.last, full.last);
        if full.best_step != 12 {
            assert_ne!(full.last, full.model);
        }
    }

    #[test]
    fn same_seed_same_metrics() {
        let d = data();
        let a = train_predecessor(model(2), &d, &cfg(Stage::Predecessor, 20)).unwrap();
        let b = train_predecessor(model(2), &d, &cfg(Stage::Predecessor, 20)).unwrap();
        assert_eq!(
            a.metrics.without_wall_clock(),
            b.metrics.without_wall_clock()
        );
        assert_eq!(a.model, b.model);
        assert_eq!(a.metrics.split("dev").count(), 5);
    }

    #[test]
    fn compress_touches_only_successor_modules() {
        let d = data();
        let pred = model(4);
        let map = CompressionMap::uniform(4, 2).unwrap();
        let before = build_hybrid(&pred, &map).unwrap().named_hashes();
        let sched = ReplacementScheduler::linear(0.05, 0.3).unwrap();
        let c = TrainConfig {
            patience: 100,
            ..cfg(Stage::Compress, 20)
        };
        let out = compress(&pred, &d, &map, &sched, &c).unwrap();
        let after = out.model.named_hashes();
        let mut changed = 0;
        for ((name, h0), (_, h1)) in before.iter().zip(&after) {
            if HybridModel::is_successor_param(name) {
                changed += (h0 != h1) as usize;
            } else {
                assert_eq!(h0, h1, "{name} changed");
            }
        }
        assert!(changed > 0 || out.best_step == 0);
        for r in out.metrics.records() {
            assert_eq!(r.p_d, Some(sched.rate(r.step)));
            assert_eq!(r.lr_effective, sched.rate(r.step) * c.lr);
        }
    }

    #[test]
    fn frozen_shared_finetune_keeps_embeddings() {
        let d = data();
        let m = model(1);
        let c = TrainConfig {
            freeze_shared: true,
            ..cfg(Stage::Finetune, 10)
        };
        let out = finetune_successor(m.clone(), &d, &c).unwrap();
        assert_eq!(out.model.embeddings, m.embeddings);
        assert_eq!(out.model.head, m.head);
    }

    #[test]
    fn nan_loss_aborts_with_last_good_checkpoint() {
        let mut m = model(1);
        m.head.bias = Tensor::param(vec![2], vec![f64::NAN, 0.0]).unwrap();
        match train_predecessor(m, &data(), &cfg(Stage::Predecessor, 5)) {
            Err(Error::Diverged { step, last_good }) => {
                assert_eq!(step, 0);
                assert!(EncoderModel::from_checkpoint(&last_good).is_ok());
            }
            other => panic!("{:?}", other.map(|o| o.steps_run)),
        }
    }
}
