//! Experiment building blocks shared by the CLI verbs and the acceptance suite.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use theseus_core::data::{generate_synthetic, load_tsv, Dataset, SyntheticSpec};
use theseus_core::model::{count_flops, EncoderConfig, EncoderModel};
use theseus_core::tensor::AttnMask;
use theseus_core::theseus::{
    assemble_successor, CompressionMap, HybridModel, ReplacementMask, ReplacementScheduler,
};
use theseus_core::training::{
    compress, evaluate, finetune_successor, train_predecessor, EvalResult, MaskedHybrid,
    RunMetrics, Stage, TrainConfig, TrainOutcome,
};
use theseus_core::{Error, Result};

use crate::config::{DataSource, RunConfig, SweepMode};

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    match n {
        0 => f64::NAN,
        _ if n % 2 == 1 => v[n / 2],
        _ => (v[n / 2 - 1] + v[n / 2]) / 2.0,
    }
}

pub fn load_data(cfg: &RunConfig) -> Result<Dataset> {
    match &cfg.data {
        DataSource::Synthetic {
            task,
            n_train,
            n_dev,
            n_test,
            n_classes,
            seed,
        } => generate_synthetic(&SyntheticSpec {
            task: *task,
            train: *n_train,
            dev: *n_dev,
            test: *n_test,
            seq_len: cfg.model.max_seq_len,
            vocab_size: cfg.model.vocab_size,
            n_classes: *n_classes,
            seed: *seed,
        }),
        DataSource::Tsv {
            train,
            dev,
            test,
            text_column,
            label_column,
            max_vocab,
        } => {
            let tr = load_tsv(train, text_column, label_column, None, *max_vocab)?;
            let dv = load_tsv(dev, text_column, label_column, Some(&tr.vocab), *max_vocab)?;
            let te = load_tsv(test, text_column, label_column, Some(&tr.vocab), *max_vocab)?;
            let n_classes = tr.n_classes.max(dv.n_classes).max(te.n_classes).max(2);
            Ok(Dataset {
                train: tr.examples,
                dev: dv.examples,
                test: te.examples,
                n_classes,
                vocab_size: tr.vocab.len(),
            })
        }
    }
}

/// Model config with vocabulary and class count taken from the data.
pub fn model_config(cfg: &RunConfig, data: &Dataset) -> EncoderConfig {
    EncoderConfig {
        vocab_size: data.vocab_size,
        n_classes: data.n_classes,
        ..cfg.model.clone()
    }
}

pub fn train_fresh_predecessor(
    cfg: &RunConfig,
    data: &Dataset,
    seed: u64,
) -> Result<TrainOutcome<EncoderModel>> {
    let model = EncoderModel::init(&model_config(cfg, data), seed)?;
    train_predecessor(model, data, &cfg.stage(Stage::Predecessor, seed))
}

/// Compression followed by successor fine-tuning.
pub struct TheseusRun {
    /// Best-dev hybrid and successor; the `_final` fields are the last-step models.
    pub hybrid: HybridModel,
    pub hybrid_final: HybridModel,
    pub successor: EncoderModel,
    pub successor_final: EncoderModel,
    /// Successor dev accuracy after compression, before fine-tuning.
    pub compressed_dev: EvalResult,
    pub successor_dev: EvalResult,
    pub metrics: RunMetrics,
}

pub fn theseus_run(
    cfg: &RunConfig,
    data: &Dataset,
    predecessor: &EncoderModel,
    map: &CompressionMap,
    scheduler: &ReplacementScheduler,
    seed: u64,
) -> Result<TheseusRun> {
    let c = compress(
        predecessor,
        data,
        map,
        scheduler,
        &cfg.stage(Stage::Compress, seed),
    )?;
    let compressed_dev = evaluate(&MaskedHybrid::successor(&c.model), &data.dev)?;
    let f = finetune_successor(
        assemble_successor(&c.model),
        data,
        &cfg.stage(Stage::Finetune, seed),
    )?;
    let successor_dev = evaluate(&f.model, &data.dev)?;
    let mut metrics = c.metrics;
    metrics.extend(f.metrics)?;
    Ok(TheseusRun {
        hybrid: c.model,
        hybrid_final: c.last,
        successor: f.model,
        successor_final: f.last,
        compressed_dev,
        successor_dev,
        metrics,
    })
}

/// Fine-tuning config for the truncated baseline: the successor fine-tuning
/// stage, given as many steps as compression plus fine-tuning together.
pub fn baseline_config(cfg: &RunConfig, data: &Dataset, seed: u64) -> TrainConfig {
    let n = data.train.len();
    let steps = cfg.compress.total_steps(n) + cfg.finetune.total_steps(n);
    TrainConfig {
        max_steps: Some(steps),
        max_epochs: None,
        ..cfg.stage(Stage::Finetune, seed)
    }
}

/// Bottom `k` predecessor layers fine-tuned directly.
pub fn truncated_baseline(
    cfg: &RunConfig,
    data: &Dataset,
    predecessor: &EncoderModel,
    k: usize,
    seed: u64,
) -> Result<TrainOutcome<EncoderModel>> {
    finetune_successor(
        predecessor.truncated(k)?,
        data,
        &baseline_config(cfg, data, seed),
    )
}

#[derive(Debug, Clone)]
pub struct SchedulerComparison {
    /// `(rate, per-seed compressed dev accuracy)` for each constant candidate.
    pub constant: Vec<(f64, Vec<f64>)>,
    pub best_constant: f64,
    pub curriculum: Vec<f64>,
    pub anti: Vec<f64>,
}

impl SchedulerComparison {
    pub fn best_constant_accuracies(&self) -> &[f64] {
        &self
            .constant
            .iter()
            .find(|(r, _)| *r == self.best_constant)
            .expect("best is a candidate")
            .1
    }
}

/// Compression under each schedule; accuracies are the successor's dev
/// accuracy right after compression. The constant rate is the candidate with
/// the highest median. Curriculum and anti-curriculum share `(k, b)` from
/// the configured linear scheduler.
pub fn compare_schedulers(
    cfg: &RunConfig,
    data: &Dataset,
    predecessor: &EncoderModel,
    seeds: &[u64],
) -> Result<SchedulerComparison> {
    let (k, b) = match cfg.scheduler {
        ReplacementScheduler::Linear { k, b } | ReplacementScheduler::AntiLinear { k, b } => (k, b),
        ReplacementScheduler::Constant { .. } => {
            return Err(Error::Config(
                "compare-schedulers needs a linear scheduler for (k, b)".into(),
            ))
        }
    };
    let run = |sched: &ReplacementScheduler| -> Result<Vec<f64>> {
        seeds
            .iter()
            .map(|&s| {
                let out = compress(
                    predecessor,
                    data,
                    &cfg.map,
                    sched,
                    &cfg.stage(Stage::Compress, s),
                )?;
                Ok(evaluate(&MaskedHybrid::successor(&out.model), &data.dev)?.accuracy)
            })
            .collect()
    };
    let mut constant = Vec::new();
    for &p in &cfg.constant_rates {
        constant.push((p, run(&ReplacementScheduler::constant(p)?)?));
    }
    let best_constant = constant
        .iter()
        .fold(None::<(f64, f64)>, |best, (p, accs)| {
            let m = median(accs);
            match best {
                Some((_, bm)) if bm >= m => best,
                _ => Some((*p, m)),
            }
        })
        .map(|(p, _)| p)
        .ok_or_else(|| Error::Config("compare.constant_rates is empty".into()))?;
    Ok(SchedulerComparison {
        constant,
        best_constant,
        curriculum: run(&ReplacementScheduler::linear(k, b)?)?,
        anti: run(&ReplacementScheduler::anti_linear(k, b)?)?,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModuleImpact {
    pub position: usize,
    pub layers: Vec<usize>,
    pub accuracy: f64,
    pub delta: f64,
}

/// Replaces one module at a time and reports the change in accuracy
/// relative to the predecessor.
pub fn analyze_replacement(
    predecessor: &EncoderModel,
    hybrid: &HybridModel,
    split: &[theseus_core::data::Example],
) -> Result<Vec<ModuleImpact>> {
    hybrid
        .map
        .validate_for(predecessor.n_layers())
        .map_err(|e| Error::Config(e.to_string()))?;
    for (pair, group) in hybrid.pairs.iter().zip(hybrid.map.groups()) {
        for (layer, &i) in pair.prd.iter().zip(group) {
            if *layer != predecessor.layers[i] {
                return Err(Error::Config(format!(
                    "hybrid module layer {i} does not match the predecessor"
                )));
            }
        }
    }
    let base = evaluate(predecessor, split)?.accuracy;
    let n = hybrid.n_modules();
    (0..n)
        .map(|i| {
            let acc = evaluate(
                &MaskedHybrid::new(hybrid, ReplacementMask::only(n, i)),
                split,
            )?
            .accuracy;
            Ok(ModuleImpact {
                position: i,
                layers: hybrid.map.groups()[i].clone(),
                accuracy: acc,
                delta: acc - base,
            })
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct RateRun {
    pub rate: f64,
    pub mode: SweepMode,
    pub lr: f64,
    pub accuracies: Vec<f64>,
}

/// Constant-rate compression at each rate; in fixed-equivalent-lr mode the
/// learning rate is `lr / p` so that `p · lr` stays at the configured value.
pub fn sweep_rates(
    cfg: &RunConfig,
    data: &Dataset,
    predecessor: &EncoderModel,
    seeds: &[u64],
) -> Result<Vec<RateRun>> {
    let mut out = Vec::new();
    for &rate in &cfg.sweep_rates {
        if rate <= 0.0 {
            return Err(Error::Param(format!(
                "rate {rate} rejected: lr'/p is undefined at p = 0"
            )));
        }
        let sched = ReplacementScheduler::constant(rate)?;
        for &mode in &cfg.sweep_modes {
            let lr = match mode {
                SweepMode::FixedLr => cfg.compress.lr,
                SweepMode::FixedEquivalentLr => cfg.compress.lr / rate,
            };
            let mut accuracies = Vec::new();
            for &s in seeds {
                let tc = TrainConfig {
                    lr,
                    ..cfg.stage(Stage::Compress, s)
                };
                let c = compress(predecessor, data, &cfg.map, &sched, &tc)?;
                accuracies.push(evaluate(&MaskedHybrid::successor(&c.model), &data.dev)?.accuracy);
            }
            out.push(RateRun {
                rate,
                mode,
                lr,
                accuracies,
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct DepthRun {
    pub ratio: usize,
    pub successor_layers: usize,
    pub theseus: Vec<f64>,
    pub baseline: Vec<f64>,
    pub flop_ratio: f64,
}

/// FLOP ratio between a model and a shallower copy of it.
pub fn flop_ratio(config: &EncoderConfig, successor_layers: usize, seq_len: usize) -> f64 {
    count_flops(config, seq_len) as f64
        / count_flops(&config.with_layers(successor_layers), seq_len) as f64
}

/// For each group size: uniform map (the last group absorbs any remainder),
/// Theseus compression plus fine-tuning versus the truncated baseline at the same depth.
pub fn depth_sweep(
    cfg: &RunConfig,
    data: &Dataset,
    predecessor: &EncoderModel,
    seeds: &[u64],
) -> Result<Vec<DepthRun>> {
    let n = predecessor.n_layers();
    let mut out = Vec::new();
    for &ratio in &cfg.depth_ratios {
        let map = CompressionMap::uniform(n, ratio)?.with_init(cfg.map.init());
        let k = map.successor_layers();
        let (mut theseus, mut baseline) = (Vec::new(), Vec::new());
        for &s in seeds {
            theseus.push(
                theseus_run(cfg, data, predecessor, &map, &cfg.scheduler, s)?
                    .successor_dev
                    .accuracy,
            );
            let b = truncated_baseline(cfg, data, predecessor, k, s)?;
            baseline.push(evaluate(&b.model, &data.dev)?.accuracy);
        }
        let flop_ratio = flop_ratio(&predecessor.config, k, predecessor.config.max_seq_len);
        out.push(DepthRun {
            ratio,
            successor_layers: k,
            theseus,
            baseline,
            flop_ratio,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy)]
pub struct BenchResult {
    pub predecessor_ms: f64,
    pub successor_ms: f64,
    pub wall_ratio: f64,
    pub flop_ratio: f64,
}

/// Median forward-pass time of each model over `reps` timed runs (after two
/// discarded warm-up runs) on one random full-length batch.
pub fn speed_bench(
    predecessor: &EncoderModel,
    successor: &EncoderModel,
    batch: usize,
    reps: usize,
) -> Result<BenchResult> {
    if reps < 10 {
        return Err(Error::Param(format!(
            "reps = {reps}; at least 10 are required"
        )));
    }
    let seq = predecessor
        .config
        .max_seq_len
        .min(successor.config.max_seq_len);
    let vocab = predecessor
        .config
        .vocab_size
        .min(successor.config.vocab_size);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let tokens: Vec<usize> = (0..batch * seq).map(|_| rng.gen_range(0..vocab)).collect();
    let mask = AttnMask::full(batch, seq);
    let time = |m: &EncoderModel| -> Result<f64> {
        let t = Instant::now();
        m.logits(&tokens, &mask)?;
        Ok(t.elapsed().as_secs_f64() * 1e3)
    };
    for _ in 0..2 {
        time(predecessor)?;
        time(successor)?;
    }
    let (mut a, mut b) = (Vec::with_capacity(reps), Vec::with_capacity(reps));
    for _ in 0..reps {
        a.push(time(predecessor)?);
        b.push(time(successor)?);
    }
    let (pm, sm) = (median(&a), median(&b));
    Ok(BenchResult {
        predecessor_ms: pm,
        successor_ms: sm,
        wall_ratio: pm / sm,
        flop_ratio: count_flops(&predecessor.config, seq) as f64
            / count_flops(&successor.config, seq) as f64,
    })
}
