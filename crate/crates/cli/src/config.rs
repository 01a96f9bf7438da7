//! Run configuration: one `section.key = value` assignment per line, `#` comments.
//!
//! Every key has a default; unknown keys are rejected. The canonical text
//! (all keys, sorted) is hashed to tag every output row.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};
use theseus_core::data::SyntheticTask;
use theseus_core::model::EncoderConfig;
use theseus_core::theseus::{slope_reaching, CompressionMap, ReplacementScheduler, SuccessorInit};
use theseus_core::training::{Stage, TrainConfig};
use theseus_core::{Error, Result};

const DEFAULTS: &[(&str, &str)] = &[
    ("model.vocab_size", "8"),
    ("model.max_seq_len", "13"),
    ("model.d_model", "32"),
    ("model.n_heads", "4"),
    ("model.d_ff", "128"),
    ("model.n_layers", "4"),
    ("model.dropout_rate", "0.0"),
    ("data.source", "synthetic"),
    ("data.task", "bracket-balance"),
    ("data.n_train", "2000"),
    ("data.n_dev", "1000"),
    ("data.n_test", "1000"),
    ("data.n_classes", "2"),
    ("data.seed", "7"),
    ("data.train_path", ""),
    ("data.dev_path", ""),
    ("data.test_path", ""),
    ("data.text_column", "sentence"),
    ("data.label_column", "label"),
    ("data.max_vocab", "10000"),
    ("predecessor.batch_size", "32"),
    ("predecessor.max_steps", "3000"),
    ("predecessor.max_epochs", ""),
    ("predecessor.lr", "3e-4"),
    ("predecessor.weight_decay", "0"),
    ("predecessor.eval_every", "200"),
    ("predecessor.patience", "5"),
    ("compress.batch_size", "32"),
    ("compress.max_steps", "800"),
    ("compress.max_epochs", ""),
    ("compress.lr", "5e-4"),
    ("compress.weight_decay", "0"),
    ("compress.eval_every", "200"),
    ("compress.patience", "5"),
    ("finetune.batch_size", "32"),
    ("finetune.max_steps", "400"),
    ("finetune.max_epochs", ""),
    ("finetune.lr", "5e-4"),
    ("finetune.weight_decay", "0"),
    ("finetune.eval_every", "200"),
    ("finetune.patience", "5"),
    ("finetune.freeze_shared", "false"),
    ("compression.groups", ""),
    ("compression.group_size", "2"),
    ("compression.successor_layers", "1"),
    ("compression.init", "group-leading"),
    ("scheduler.kind", "linear"),
    ("scheduler.p", "0.5"),
    ("scheduler.b", "0.3"),
    ("scheduler.k", ""),
    ("scheduler.reach_steps", "600"),
    ("run.seed", "0"),
    ("run.seeds", "5"),
    ("run.out", "runs"),
    ("sweep.rates", "0.3,0.5,0.7,0.9,1.0"),
    ("sweep.modes", "fixed-lr,fixed-equivalent-lr"),
    ("compare.constant_rates", "0.5,0.7,0.9"),
    ("depth.ratios", "2,3,4"),
    ("bench.batch", "32"),
    ("bench.reps", "20"),
];

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Synthetic {
        task: SyntheticTask,
        n_train: usize,
        n_dev: usize,
        n_test: usize,
        n_classes: usize,
        seed: u64,
    },
    Tsv {
        train: PathBuf,
        dev: PathBuf,
        test: PathBuf,
        text_column: String,
        label_column: String,
        max_vocab: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepMode {
    /// Same learning rate at every replacement rate.
    FixedLr,
    /// Learning rate divided by the rate so the expected per-module rate is constant.
    FixedEquivalentLr,
}

impl FromStr for SweepMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fixed-lr" => Ok(SweepMode::FixedLr),
            "fixed-equivalent-lr" => Ok(SweepMode::FixedEquivalentLr),
            other => Err(Error::Config(format!("unknown sweep mode {other:?}"))),
        }
    }
}

impl fmt::Display for SweepMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SweepMode::FixedLr => "fixed-lr",
            SweepMode::FixedEquivalentLr => "fixed-equivalent-lr",
        })
    }
}

/// Fully validated run configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: EncoderConfig,
    pub data: DataSource,
    pub predecessor: TrainConfig,
    pub compress: TrainConfig,
    pub finetune: TrainConfig,
    pub map: CompressionMap,
    pub scheduler: ReplacementScheduler,
    pub seed: u64,
    pub n_seeds: usize,
    pub out: PathBuf,
    pub sweep_rates: Vec<f64>,
    pub sweep_modes: Vec<SweepMode>,
    pub constant_rates: Vec<f64>,
    pub depth_ratios: Vec<usize>,
    pub bench_batch: usize,
    pub bench_reps: usize,
    raw: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::from_pairs(std::iter::empty::<(String, String)>()).expect("defaults are valid")
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        Self::from_pairs(parse_lines(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Applies `key=value` overrides on top of this config.
    pub fn with_overrides<I, K, V>(&self, overrides: I) -> Result<Self>
    where
        I: IntoIterator<Item = (K, V)>,
        K: Into<String>,
        V: Into<String>,
    {
        let pairs = self
            .raw
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .chain(overrides.into_iter().map(|(k, v)| (k.into(), v.into())));
        Self::from_pairs(pairs.collect::<Vec<_>>())
    }

    fn from_pairs<I, K, V>(pairs: I) -> Result<Self>
    where
        I: IntoIterator<Item = (K, V)>,
        K: Into<String>,
        V: Into<String>,
    {
        let mut raw: BTreeMap<String, String> = DEFAULTS
            .iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect();
        for (k, v) in pairs {
            let (k, v) = (k.into(), v.into());
            if !raw.contains_key(&k) {
                return Err(Error::Config(format!("unknown key {k:?}")));
            }
            raw.insert(k, v.trim().to_string());
        }
        build(raw)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.raw.get(key).map(String::as_str)
    }

    /// Every key, sorted, one `key = value` per line.
    pub fn canonical_text(&self) -> String {
        self.raw
            .iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// Short hex digest of the canonical text.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.canonical_text().as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn seeds(&self) -> Vec<u64> {
        (0..self.n_seeds as u64).map(|i| self.seed + i).collect()
    }

    /// `linear:k:b` or `anti-linear:k:b` sharing the configured slope and intercept.
    pub fn scheduler_linear_name(&self, anti: bool) -> String {
        let (k, b) = match self.scheduler {
            ReplacementScheduler::Linear { k, b } | ReplacementScheduler::AntiLinear { k, b } => {
                (k, b)
            }
            ReplacementScheduler::Constant { .. } => (f64::NAN, f64::NAN),
        };
        let name = if anti { "anti-linear" } else { "linear" };
        format!("{name}:{k}:{b}")
    }

    /// Stage config with the run seed substituted.
    pub fn stage(&self, stage: Stage, seed: u64) -> TrainConfig {
        let base = match stage {
            Stage::Predecessor => &self.predecessor,
            Stage::Compress => &self.compress,
            Stage::Finetune => &self.finetune,
        };
        TrainConfig {
            seed,
            ..base.clone()
        }
    }
}

fn parse_lines(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

struct Fields<'a>(&'a BTreeMap<String, String>);

impl Fields<'_> {
    fn str(&self, key: &str) -> &str {
        &self.0[key]
    }

    fn num<T: FromStr>(&self, key: &str) -> Result<T> {
        self.str(key).parse().map_err(|_| {
            Error::Config(format!("{key} = {:?} is not a valid number", self.str(key)))
        })
    }

    fn opt<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        if self.str(key).is_empty() {
            Ok(None)
        } else {
            self.num(key).map(Some)
        }
    }

    fn bool(&self, key: &str) -> Result<bool> {
        match self.str(key) {
            "true" => Ok(true),
            "false" => Ok(false),
            v => Err(Error::Config(format!("{key} = {v:?} is not true/false"))),
        }
    }

    fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>> {
        self.str(key)
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse()
                    .map_err(|_| Error::Config(format!("{key}: cannot parse {s:?}")))
            })
            .collect()
    }

    fn train(&self, stage: Stage) -> Result<TrainConfig> {
        let p = stage.to_string();
        let key = |k: &str| format!("{p}.{k}");
        let cfg = TrainConfig {
            stage,
            batch_size: self.num(&key("batch_size"))?,
            max_steps: self.opt(&key("max_steps"))?,
            max_epochs: self.opt(&key("max_epochs"))?,
            lr: self.num(&key("lr"))?,
            weight_decay: self.num(&key("weight_decay"))?,
            eval_every: self.num(&key("eval_every"))?,
            patience: self.num(&key("patience"))?,
            seed: 0,
            freeze_shared: stage == Stage::Finetune && self.bool("finetune.freeze_shared")?,
        };
        cfg.validate()
            .map_err(|e| Error::Config(format!("[{p}] {e}")))?;
        Ok(cfg)
    }
}

fn build(raw: BTreeMap<String, String>) -> Result<RunConfig> {
    let f = Fields(&raw);
    let data = match f.str("data.source") {
        "synthetic" => DataSource::Synthetic {
            task: f.str("data.task").parse()?,
            n_train: f.num("data.n_train")?,
            n_dev: f.num("data.n_dev")?,
            n_test: f.num("data.n_test")?,
            n_classes: f.num("data.n_classes")?,
            seed: f.num("data.seed")?,
        },
        "tsv" => {
            let path = |k: &str| {
                let v = f.str(k);
                if v.is_empty() {
                    Err(Error::Config(format!("{k} is required for tsv data")))
                } else {
                    Ok(PathBuf::from(v))
                }
            };
            DataSource::Tsv {
                train: path("data.train_path")?,
                dev: path("data.dev_path")?,
                test: path("data.test_path")?,
                text_column: f.str("data.text_column").to_string(),
                label_column: f.str("data.label_column").to_string(),
                max_vocab: f.num("data.max_vocab")?,
            }
        }
        other => {
            return Err(Error::Config(format!(
                "data.source {other:?} is not synthetic or tsv"
            )))
        }
    };
    let n_classes = match &data {
        DataSource::Synthetic { n_classes, .. } => *n_classes,
        DataSource::Tsv { .. } => 2,
    };
    let model = EncoderConfig {
        vocab_size: f.num("model.vocab_size")?,
        max_seq_len: f.num("model.max_seq_len")?,
        d_model: f.num("model.d_model")?,
        n_heads: f.num("model.n_heads")?,
        d_ff: f.num("model.d_ff")?,
        n_layers: f.num("model.n_layers")?,
        n_classes,
        dropout_rate: f.num("model.dropout_rate")?,
    };
    model.validate()?;

    let map = if f.str("compression.groups").is_empty() {
        CompressionMap::uniform(model.n_layers, f.num("compression.group_size")?)?
    } else {
        f.str("compression.groups").parse()?
    };
    let per: usize = f.num("compression.successor_layers")?;
    let map = CompressionMap::new(map.groups().to_vec(), per)?
        .with_init(f.str("compression.init").parse::<SuccessorInit>()?);
    map.validate_for(model.n_layers)?;
    map.init_sources(model.n_layers)?;

    let b: f64 = f.num("scheduler.b")?;
    let k = match f.opt::<f64>("scheduler.k")? {
        Some(k) => k,
        None => slope_reaching(b, f.num("scheduler.reach_steps")?)?,
    };
    let scheduler = match f.str("scheduler.kind") {
        "constant" => ReplacementScheduler::constant(f.num("scheduler.p")?)?,
        "linear" => ReplacementScheduler::linear(k, b)?,
        "anti-linear" => ReplacementScheduler::anti_linear(k, b)?,
        other => return Err(Error::Config(format!("unknown scheduler.kind {other:?}"))),
    };

    let sweep_rates: Vec<f64> = f.list("sweep.rates")?;
    let constant_rates: Vec<f64> = f.list("compare.constant_rates")?;
    for &r in sweep_rates.iter().chain(&constant_rates) {
        if !(r > 0.0 && r <= 1.0) {
            return Err(Error::Config(format!(
                "replacement rate {r} must lie in (0, 1]; a rate of 0 never trains the successor and divides lr'/p by zero"
            )));
        }
    }
    let depth_ratios: Vec<usize> = f.list("depth.ratios")?;
    if depth_ratios.iter().any(|&r| r == 0 || r > model.n_layers) {
        return Err(Error::Config(format!(
            "depth.ratios must lie in 1..={}",
            model.n_layers
        )));
    }
    let n_seeds: usize = f.num("run.seeds")?;
    if n_seeds == 0 {
        return Err(Error::Config("run.seeds must be >= 1".into()));
    }
    let bench_reps: usize = f.num("bench.reps")?;
    if bench_reps < 10 {
        return Err(Error::Config("bench.reps must be >= 10".into()));
    }

    Ok(RunConfig {
        predecessor: f.train(Stage::Predecessor)?,
        compress: f.train(Stage::Compress)?,
        finetune: f.train(Stage::Finetune)?,
        model,
        data,
        map,
        scheduler,
        seed: f.num("run.seed")?,
        n_seeds,
        out: PathBuf::from(f.str("run.out")),
        sweep_rates,
        sweep_modes: f.list("sweep.modes")?,
        constant_rates,
        depth_ratios,
        bench_batch: f.num("bench.batch")?,
        bench_reps,
        raw,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        let c = RunConfig::default();
        assert_eq!(c.map, CompressionMap::uniform(4, 2).unwrap());
        assert_eq!(c.seeds(), vec![0, 1, 2, 3, 4]);
        assert_eq!(c.scheduler.rate(0), 0.3);
        assert_eq!(c.scheduler.rate(600), 1.0);
    }

    #[test]
    fn unknown_key_rejected() {
        let err = RunConfig::parse("model.d_modl = 16\n").unwrap_err();
        assert!(err.to_string().contains("d_modl"));
    }

    #[test]
    fn comments_blank_lines_and_overrides() {
        let c =
            RunConfig::parse("# toy\n\nmodel.n_layers = 6  # deeper\ncompression.group_size = 3\n")
                .unwrap();
        assert_eq!(c.model.n_layers, 6);
        assert_eq!(c.map.n_modules(), 2);
        let o = c.with_overrides([("run.seeds", "2")]).unwrap();
        assert_eq!(o.n_seeds, 2);
        assert_eq!(o.model.n_layers, 6);
        assert_ne!(o.hash(), c.hash());
    }

    #[test]
    fn hash_ignores_formatting() {
        let a = RunConfig::parse("model.d_model=32\n").unwrap();
        let b = RunConfig::parse("  model.d_model =   32   # same\n").unwrap();
        assert_eq!(a.hash(), b.hash());
        assert_eq!(a.hash(), RunConfig::default().hash());
        assert_eq!(a.hash().len(), 16);
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(RunConfig::parse("sweep.rates = 0.0,0.5\n")
            .unwrap_err()
            .to_string()
            .contains("divides"));
        assert!(RunConfig::parse("compression.groups = 0-1,3\n").is_err());
        assert!(RunConfig::parse("predecessor.max_epochs = 3\n").is_err());
        assert!(RunConfig::parse("predecessor.max_steps = \npredecessor.max_epochs = 3\n").is_ok());
        assert!(RunConfig::parse("model.d_model 32\n").is_err());
        assert!(RunConfig::parse("bench.reps = 5\n").is_err());
    }

    #[test]
    fn explicit_slope_and_groups() {
        let c = RunConfig::parse(
            "scheduler.k = 0.0009\nscheduler.b = 0.1\ncompression.groups = 0,1-3\n",
        )
        .unwrap();
        assert_eq!(
            c.scheduler,
            ReplacementScheduler::linear(0.0009, 0.1).unwrap()
        );
        assert_eq!(c.map.groups(), &[vec![0], vec![1, 2, 3]]);
    }
}
