//! The CLI verbs. Each writes its artifacts under an output directory and
//! returns the path of its summary table.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use theseus_core::checkpoint::Checkpoint;
use theseus_core::model::EncoderModel;
use theseus_core::theseus::{HybridModel, ReplacementMask};
use theseus_core::training::{evaluate, EvalResult, MaskedHybrid, RunMetrics};
use theseus_core::Error;

use crate::config::RunConfig;
use crate::experiment::{self, median};

/// Creates `dir`, refusing a non-empty existing one unless `overwrite`.
pub fn prepare_out(dir: &Path, overwrite: bool) -> anyhow::Result<()> {
    if dir.exists() {
        let occupied = fs::read_dir(dir)?.next().is_some();
        if occupied && !overwrite {
            bail!(
                "output directory {} is not empty; pass --overwrite to replace it",
                dir.display()
            );
        }
        if occupied {
            fs::remove_dir_all(dir)?;
        }
    }
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(())
}

/// CSV with a `config_hash` column prepended to every row.
struct Table {
    writer: csv::Writer<fs::File>,
    hash: String,
    path: PathBuf,
}

impl Table {
    fn create(path: PathBuf, cfg: &RunConfig, header: &[&str]) -> anyhow::Result<Self> {
        let mut writer = csv::Writer::from_path(&path)?;
        let mut cols = vec!["config_hash"];
        cols.extend_from_slice(header);
        writer.write_record(&cols)?;
        Ok(Table {
            writer,
            hash: cfg.hash(),
            path,
        })
    }

    fn row(&mut self, fields: &[String]) -> anyhow::Result<()> {
        let mut rec = vec![self.hash.clone()];
        rec.extend_from_slice(fields);
        self.writer.write_record(&rec)?;
        Ok(())
    }

    fn finish(mut self) -> anyhow::Result<PathBuf> {
        self.writer.flush()?;
        Ok(self.path)
    }
}

fn f(v: f64) -> String {
    format!("{v:.6}")
}

fn write_config(cfg: &RunConfig, dir: &Path) -> anyhow::Result<()> {
    fs::write(dir.join("config.txt"), cfg.canonical_text())?;
    Ok(())
}

fn append_error(dir: &Path, seed: u64, stage: &str, err: &Error) -> anyhow::Result<()> {
    if let Error::Diverged { last_good, .. } = err {
        last_good.save(&dir.join(format!("{stage}-last-good.ckpt")))?;
    }
    let record = serde_json::json!({ "seed": seed, "stage": stage, "error": err.to_string() });
    let mut file = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(dir.join("errors.jsonl"))?;
    writeln!(file, "{record}")?;
    Ok(())
}

/// Per-seed results of the full pipeline.
#[derive(Debug, Clone)]
pub struct PipelineRow {
    pub seed: u64,
    pub predecessor_dev: f64,
    pub predecessor_test: f64,
    pub successor_dev: f64,
    pub successor_test: f64,
    pub successor_layers: usize,
}

fn pipeline_seed(
    cfg: &RunConfig,
    seed: u64,
    dir: &Path,
) -> std::result::Result<PipelineRow, (&'static str, Error)> {
    let data = experiment::load_data(cfg).map_err(|e| ("data", e))?;
    let metrics_path = dir.join("metrics.jsonl");
    let log =
        |m: &RunMetrics, stage: &'static str| m.append_jsonl(&metrics_path).map_err(|e| (stage, e));

    let pred =
        experiment::train_fresh_predecessor(cfg, &data, seed).map_err(|e| ("predecessor", e))?;
    log(&pred.metrics, "predecessor")?;
    let save = |ck: Checkpoint, name: &str, stage: &'static str| {
        ck.save(&dir.join(name)).map_err(|e| (stage, e))
    };
    save(
        pred.model.to_checkpoint(),
        "predecessor.ckpt",
        "predecessor",
    )?;
    save(
        pred.last.to_checkpoint(),
        "predecessor-final.ckpt",
        "predecessor",
    )?;

    let run = experiment::theseus_run(cfg, &data, &pred.model, &cfg.map, &cfg.scheduler, seed)
        .map_err(|e| ("compress", e))?;
    log(&run.metrics, "compress")?;
    save(run.hybrid.to_checkpoint(), "hybrid.ckpt", "compress")?;
    save(
        run.hybrid_final.to_checkpoint(),
        "hybrid-final.ckpt",
        "compress",
    )?;
    save(run.successor.to_checkpoint(), "successor.ckpt", "finetune")?;
    save(
        run.successor_final.to_checkpoint(),
        "successor-final.ckpt",
        "finetune",
    )?;

    let eval = |m: &EncoderModel, split| evaluate(m, split).map_err(|e| ("evaluate", e));
    Ok(PipelineRow {
        seed,
        predecessor_dev: eval(&pred.model, &data.dev)?.accuracy,
        predecessor_test: eval(&pred.model, &data.test)?.accuracy,
        successor_dev: run.successor_dev.accuracy,
        successor_test: eval(&run.successor, &data.test)?.accuracy,
        successor_layers: run.successor.n_layers(),
    })
}

/// Predecessor training, compression, assembly, fine-tuning and test
/// evaluation for every seed; `summary.csv` holds per-seed and median rows.
pub fn pipeline(cfg: &RunConfig, out: &Path, overwrite: bool) -> anyhow::Result<PathBuf> {
    prepare_out(out, overwrite)?;
    write_config(cfg, out)?;
    let mut rows = Vec::new();
    let mut failure = None;
    for seed in cfg.seeds() {
        let dir = out.join(format!("seed-{seed}"));
        fs::create_dir_all(&dir)?;
        match pipeline_seed(cfg, seed, &dir) {
            Ok(row) => rows.push(row),
            Err((stage, err)) => {
                append_error(&dir, seed, stage, &err)?;
                failure = Some(anyhow::anyhow!("seed {seed}, stage {stage}: {err}"));
                break;
            }
        }
    }

    let header = [
        "row",
        "seed",
        "predecessor_dev",
        "predecessor_test",
        "successor_dev",
        "successor_test",
        "retention",
        "predecessor_layers",
        "successor_layers",
        "flop_ratio",
    ];
    let mut table = Table::create(out.join("summary.csv"), cfg, &header)?;
    let flops = |k: usize| experiment::flop_ratio(&cfg.model, k, cfg.model.max_seq_len);
    for r in &rows {
        table.row(&[
            "seed".into(),
            r.seed.to_string(),
            f(r.predecessor_dev),
            f(r.predecessor_test),
            f(r.successor_dev),
            f(r.successor_test),
            f(r.successor_test / r.predecessor_test),
            cfg.model.n_layers.to_string(),
            r.successor_layers.to_string(),
            f(flops(r.successor_layers)),
        ])?;
    }
    if !rows.is_empty() {
        let col = |g: fn(&PipelineRow) -> f64| median(&rows.iter().map(g).collect::<Vec<_>>());
        let k = rows[0].successor_layers;
        table.row(&[
            "median".into(),
            String::new(),
            f(col(|r| r.predecessor_dev)),
            f(col(|r| r.predecessor_test)),
            f(col(|r| r.successor_dev)),
            f(col(|r| r.successor_test)),
            f(col(|r| r.successor_test / r.predecessor_test)),
            cfg.model.n_layers.to_string(),
            k.to_string(),
            f(flops(k)),
        ])?;
    }
    let path = table.finish()?;
    match failure {
        Some(e) => Err(e),
        None => Ok(path),
    }
}

pub fn load_encoder(path: &Path) -> anyhow::Result<EncoderModel> {
    let ck = Checkpoint::load(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(EncoderModel::from_checkpoint(&ck)?)
}

pub fn load_hybrid(path: &Path) -> anyhow::Result<HybridModel> {
    let ck = Checkpoint::load(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(HybridModel::from_checkpoint(&ck)?)
}

/// One row per module position: dev accuracy with only that module replaced,
/// and its difference from the predecessor.
pub fn analyze_replacement(
    cfg: &RunConfig,
    predecessor: &Path,
    compressed: &Path,
    out: &Path,
    overwrite: bool,
) -> anyhow::Result<PathBuf> {
    let pred = load_encoder(predecessor)?;
    let hybrid = load_hybrid(compressed)?;
    let data = experiment::load_data(cfg)?;
    let rows = experiment::analyze_replacement(&pred, &hybrid, &data.dev)?;
    prepare_out(out, overwrite)?;
    write_config(cfg, out)?;
    let mut table = Table::create(
        out.join("summary.csv"),
        cfg,
        &["position", "layers", "dev_accuracy", "delta"],
    )?;
    for r in rows {
        let layers = r
            .layers
            .iter()
            .map(|l| l.to_string())
            .collect::<Vec<_>>()
            .join(" ");
        table.row(&[r.position.to_string(), layers, f(r.accuracy), f(r.delta)])?;
    }
    table.finish()
}

fn shared_predecessor(
    cfg: &RunConfig,
    data: &theseus_core::data::Dataset,
    path: Option<&Path>,
    out: &Path,
) -> anyhow::Result<EncoderModel> {
    match path {
        Some(p) => load_encoder(p),
        None => {
            let t = experiment::train_fresh_predecessor(cfg, data, cfg.seed)?;
            t.metrics.append_jsonl(&out.join("metrics.jsonl"))?;
            t.model
                .to_checkpoint()
                .save(&out.join("predecessor.ckpt"))?;
            Ok(t.model)
        }
    }
}

/// Median dev accuracy per (rate, mode), after constant-rate compression.
pub fn sweep_rate(
    cfg: &RunConfig,
    predecessor: Option<&Path>,
    out: &Path,
    overwrite: bool,
) -> anyhow::Result<PathBuf> {
    prepare_out(out, overwrite)?;
    write_config(cfg, out)?;
    let data = experiment::load_data(cfg)?;
    let pred = shared_predecessor(cfg, &data, predecessor, out)?;
    let runs = experiment::sweep_rates(cfg, &data, &pred, &cfg.seeds())?;
    let mut table = Table::create(
        out.join("summary.csv"),
        cfg,
        &[
            "rate",
            "mode",
            "lr",
            "equivalent_lr",
            "median_dev_accuracy",
            "seeds",
        ],
    )?;
    for r in runs {
        let per_seed = r
            .accuracies
            .iter()
            .map(|a| format!("{a:.4}"))
            .collect::<Vec<_>>()
            .join(" ");
        table.row(&[
            f(r.rate),
            r.mode.to_string(),
            format!("{:e}", r.lr),
            format!("{:e}", r.rate * r.lr),
            f(median(&r.accuracies)),
            per_seed,
        ])?;
    }
    table.finish()
}

/// Constant (best of the configured rates), curriculum and anti-curriculum schedules.
pub fn compare_schedulers(
    cfg: &RunConfig,
    predecessor: Option<&Path>,
    out: &Path,
    overwrite: bool,
) -> anyhow::Result<PathBuf> {
    prepare_out(out, overwrite)?;
    write_config(cfg, out)?;
    let data = experiment::load_data(cfg)?;
    let pred = shared_predecessor(cfg, &data, predecessor, out)?;
    let cmp = experiment::compare_schedulers(cfg, &data, &pred, &cfg.seeds())?;
    let base = median(cmp.best_constant_accuracies());
    let mut table = Table::create(
        out.join("summary.csv"),
        cfg,
        &[
            "scheduler",
            "median_dev_accuracy",
            "delta_vs_constant",
            "seeds",
        ],
    )?;
    let mut row = |name: String, accs: &[f64]| {
        let per_seed = accs
            .iter()
            .map(|a| format!("{a:.4}"))
            .collect::<Vec<_>>()
            .join(" ");
        table.row(&[name, f(median(accs)), f(median(accs) - base), per_seed])
    };
    for (p, accs) in &cmp.constant {
        row(format!("constant:{p}"), accs)?;
    }
    row(
        format!("constant-best:{}", cmp.best_constant),
        cmp.best_constant_accuracies(),
    )?;
    row(cfg.scheduler_linear_name(false), &cmp.curriculum)?;
    row(cfg.scheduler_linear_name(true), &cmp.anti)?;
    table.finish()
}

/// Theseus versus truncated fine-tuning at several compression ratios.
pub fn depth_sweep(
    cfg: &RunConfig,
    predecessor: Option<&Path>,
    out: &Path,
    overwrite: bool,
) -> anyhow::Result<PathBuf> {
    prepare_out(out, overwrite)?;
    write_config(cfg, out)?;
    let data = experiment::load_data(cfg)?;
    let pred = shared_predecessor(cfg, &data, predecessor, out)?;
    let runs = experiment::depth_sweep(cfg, &data, &pred, &cfg.seeds())?;
    let mut table = Table::create(
        out.join("summary.csv"),
        cfg,
        &[
            "ratio",
            "predecessor_layers",
            "successor_layers",
            "theseus_median",
            "baseline_median",
            "flop_ratio",
        ],
    )?;
    for r in runs {
        table.row(&[
            format!("{}:1", r.ratio),
            pred.n_layers().to_string(),
            r.successor_layers.to_string(),
            f(median(&r.theseus)),
            f(median(&r.baseline)),
            f(r.flop_ratio),
        ])?;
    }
    table.finish()
}

pub fn speed_bench(
    cfg: &RunConfig,
    predecessor: &Path,
    successor: &Path,
    out: &Path,
    overwrite: bool,
) -> anyhow::Result<PathBuf> {
    let a = load_encoder(predecessor)?;
    let b = load_encoder(successor)?;
    let r = experiment::speed_bench(&a, &b, cfg.bench_batch, cfg.bench_reps)?;
    prepare_out(out, overwrite)?;
    write_config(cfg, out)?;
    let mut table = Table::create(
        out.join("summary.csv"),
        cfg,
        &[
            "batch",
            "reps",
            "predecessor_ms",
            "successor_ms",
            "wall_ratio",
            "flop_ratio",
        ],
    )?;
    table.row(&[
        cfg.bench_batch.to_string(),
        cfg.bench_reps.to_string(),
        f(r.predecessor_ms),
        f(r.successor_ms),
        f(r.wall_ratio),
        f(r.flop_ratio),
    ])?;
    table.finish()
}

/// Evaluates an encoder checkpoint, or a hybrid under `mask` (default: all replaced).
pub fn eval(
    cfg: &RunConfig,
    checkpoint: &Path,
    split: &str,
    mask: Option<&str>,
) -> anyhow::Result<EvalResult> {
    let data = experiment::load_data(cfg)?;
    let examples = match split {
        "train" => &data.train,
        "dev" => &data.dev,
        "test" => &data.test,
        other => bail!("unknown split {other:?} (train, dev or test)"),
    };
    let ck = Checkpoint::load(checkpoint)
        .with_context(|| format!("reading {}", checkpoint.display()))?;
    match ck.header_value("kind") {
        Some("hybrid") => {
            let h = HybridModel::from_checkpoint(&ck)?;
            let r = match mask {
                None => ReplacementMask::all(h.n_modules(), true),
                Some(bits) => ReplacementMask {
                    r: bits
                        .chars()
                        .map(|c| match c {
                            '0' => Ok(false),
                            '1' => Ok(true),
                            _ => Err(anyhow::anyhow!("mask must be a 0/1 string")),
                        })
                        .collect::<anyhow::Result<_>>()?,
                    p_used: f64::NAN,
                    step: 0,
                },
            };
            Ok(evaluate(&MaskedHybrid::new(&h, r), examples)?)
        }
        _ => {
            if mask.is_some() {
                bail!("--mask applies only to hybrid checkpoints");
            }
            Ok(evaluate(&EncoderModel::from_checkpoint(&ck)?, examples)?)
        }
    }
}
