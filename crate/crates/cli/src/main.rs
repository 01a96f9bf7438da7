use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use theseus_cli::commands;
use theseus_cli::config::RunConfig;

#[derive(Parser)]
#[command(
    name = "theseus",
    about = "Progressive module replacement for transformer compression"
)]
struct Cli {
    /// Config file of `key = value` lines; built-in defaults apply otherwise.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Base seed (overrides `run.seed`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Number of seeds, counting up from the base seed (overrides `run.seeds`).
    #[arg(long, global = true)]
    seeds: Option<usize>,
    /// Output directory (overrides `run.out`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Replace a non-empty output directory.
    #[arg(long, global = true)]
    overwrite: bool,
    /// Individual config overrides, e.g. `--set compress.lr=1e-4`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train, compress, fine-tune and evaluate for every seed.
    Pipeline,
    /// Accuracy when each module alone is replaced by its successor.
    AnalyzeReplacement {
        #[arg(long)]
        predecessor: PathBuf,
        #[arg(long)]
        hybrid: PathBuf,
    },
    /// Constant replacing rates under fixed and equivalent learning rates.
    SweepRate {
        #[arg(long)]
        predecessor: Option<PathBuf>,
    },
    /// Constant versus curriculum versus anti-curriculum schedules.
    CompareSchedulers {
        #[arg(long)]
        predecessor: Option<PathBuf>,
    },
    /// Theseus versus truncated fine-tuning across compression ratios.
    DepthSweep {
        #[arg(long)]
        predecessor: Option<PathBuf>,
    },
    /// Inference wall-clock of predecessor versus successor.
    SpeedBench {
        #[arg(long)]
        predecessor: PathBuf,
        #[arg(long)]
        successor: PathBuf,
    },
    /// Evaluate a checkpoint on one split and print JSON.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Replacement bits for a hybrid checkpoint, e.g. `1010`.
        #[arg(long)]
        mask: Option<String>,
    },
}

fn build_config(cli: &Cli) -> anyhow::Result<RunConfig> {
    let base = match &cli.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => RunConfig::default(),
    };
    let mut pairs = Vec::new();
    for s in &cli.set {
        let (k, v) = s
            .split_once('=')
            .with_context(|| format!("--set expects KEY=VALUE, got {s:?}"))?;
        pairs.push((k.trim().to_string(), v.trim().to_string()));
    }
    if let Some(seed) = cli.seed {
        pairs.push(("run.seed".into(), seed.to_string()));
    }
    if let Some(n) = cli.seeds {
        pairs.push(("run.seeds".into(), n.to_string()));
    }
    if let Some(out) = &cli.out {
        pairs.push(("run.out".into(), out.display().to_string()));
    }
    Ok(base.with_overrides(pairs)?)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = build_config(&cli)?;
    let out = cfg.out.clone();
    let ow = cli.overwrite;
    let summary = match &cli.command {
        Command::Pipeline => commands::pipeline(&cfg, &out, ow)?,
        Command::AnalyzeReplacement {
            predecessor,
            hybrid,
        } => commands::analyze_replacement(&cfg, predecessor, hybrid, &out, ow)?,
        Command::SweepRate { predecessor } => {
            commands::sweep_rate(&cfg, predecessor.as_deref(), &out, ow)?
        }
        Command::CompareSchedulers { predecessor } => {
            commands::compare_schedulers(&cfg, predecessor.as_deref(), &out, ow)?
        }
        Command::DepthSweep { predecessor } => {
            commands::depth_sweep(&cfg, predecessor.as_deref(), &out, ow)?
        }
        Command::SpeedBench {
            predecessor,
            successor,
        } => commands::speed_bench(&cfg, predecessor, successor, &out, ow)?,
        Command::Eval {
            checkpoint,
            split,
            mask,
        } => {
            let r = commands::eval(&cfg, checkpoint, split, mask.as_deref())?;
            println!(
                "{}",
                serde_json::json!({ "split": split, "loss": r.loss, "accuracy": r.accuracy })
            );
            return Ok(());
        }
    };
    println!("{}", std::fs::read_to_string(&summary)?.trim_end());
    eprintln!("wrote {}", summary.display());
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
