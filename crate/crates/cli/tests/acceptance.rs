//! Acceptance suite. Runs every criterion in sequence, prints one
//! PASS/FAIL line each, and exits nonzero if any fails.

use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use theseus_cli::commands;
use theseus_cli::config::RunConfig;
use theseus_cli::experiment::{self, median};
use theseus_core::data::Dataset;
use theseus_core::model::{count_flops, Dropout, EncoderConfig, EncoderModel, TransformerLayer};
use theseus_core::tensor::{grad_check, grad_check_model, AttnMask, Parameters, Tape, Tensor, Var};
use theseus_core::theseus::{
    assemble_successor, build_hybrid, equivalent_lr, sample_mask, slope_reaching, CompressionMap,
    HybridModel, ReplacementMask, ReplacementScheduler,
};
use theseus_core::training::{compress, evaluate, Stage, TrainConfig};

type Outcome = Result<String, String>;

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn tiny_config(n_layers: usize) -> EncoderConfig {
    EncoderConfig {
        vocab_size: 12,
        max_seq_len: 6,
        d_model: 8,
        n_heads: 2,
        d_ff: 12,
        n_layers,
        n_classes: 3,
        dropout_rate: 0.0,
    }
}

/// A randomly initialised model with weights spread wide enough that layers differ visibly.
fn spread_model(config: &EncoderConfig, seed: u64) -> EncoderModel {
    let mut m = EncoderModel::init(config, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(31) + 7);
    m.visit_mut(&mut |_, t| {
        t.data_mut()
            .iter_mut()
            .for_each(|v| *v += rng.gen_range(-0.4..0.4))
    });
    m
}

fn random_batch(
    rng: &mut ChaCha8Rng,
    batch: usize,
    seq: usize,
    vocab: usize,
) -> (Vec<usize>, AttnMask) {
    let tokens = (0..batch * seq).map(|_| rng.gen_range(0..vocab)).collect();
    let mut keep = vec![true; batch * seq];
    for b in 0..batch {
        let len = rng.gen_range(1..=seq);
        keep[b * seq + len..(b + 1) * seq]
            .iter_mut()
            .for_each(|k| *k = false);
    }
    (tokens, AttnMask::new(batch, seq, keep).unwrap())
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    let n = shape.iter().product();
    Tensor::param(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn rand_const(tape: &mut Tape, rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Var {
    let n = shape.iter().product();
    tape.constant(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .unwrap()
}

/// Op-level networks, one per `kind`.
fn op_network(kind: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (b, s, d, h) = (2, rng.gen_range(2..5), 6, 2);
    let labels: Vec<usize> = (0..b * s).map(|_| rng.gen_range(0..3)).collect();
    let consts = rng.gen::<u64>();
    let report = match kind {
        0 => {
            let mut p = vec![
                rand_tensor(&mut rng, vec![b * s, d]),
                rand_tensor(&mut rng, vec![d, 5]),
                rand_tensor(&mut rng, vec![5, 3]),
            ];
            grad_check(
                |t, v| {
                    let x = t.matmul(v[0], v[1])?;
                    let x = t.gelu(x)?;
                    let x = t.matmul(x, v[2])?;
                    t.cross_entropy(x, &labels)
                },
                &mut p,
                1e-5,
                200,
                seed,
            )
        }
        1 => {
            let mut p = vec![
                rand_tensor(&mut rng, vec![b, s, d]),
                rand_tensor(&mut rng, vec![d]),
                rand_tensor(&mut rng, vec![d]),
            ];
            grad_check(
                |t, v| {
                    let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
                    let w = rand_const(t, &mut ChaCha8Rng::seed_from_u64(consts), vec![b, s, d]);
                    let y = t.mul(y, w)?;
                    t.sum(y)
                },
                &mut p,
                1e-5,
                200,
                seed,
            )
        }
        2 => {
            let (_, mask) = random_batch(&mut rng, b, s, 4);
            let mut p = (0..3)
                .map(|_| rand_tensor(&mut rng, vec![b, s, d]))
                .collect::<Vec<_>>();
            grad_check(
                |t, v| {
                    let sc = t.head_scores(v[0], v[1], h, 0.5)?;
                    let pr = t.masked_softmax(sc, &mask)?;
                    let o = t.head_mix(pr, v[2], h)?;
                    let w = rand_const(t, &mut ChaCha8Rng::seed_from_u64(consts), vec![b, s, d]);
                    let o = t.mul(o, w)?;
                    t.sum(o)
                },
                &mut p,
                1e-5,
                200,
                seed,
            )
        }
        3 => {
            let ids: Vec<usize> = (0..b * s).map(|_| rng.gen_range(0..7)).collect();
            let mut p = vec![rand_tensor(&mut rng, vec![7, 3])];
            grad_check(
                |t, v| {
                    let e = t.embedding(v[0], &ids, &[b * s])?;
                    let sm = t.softmax(e)?;
                    let sm = t.scale(sm, 2.5)?;
                    t.cross_entropy(sm, &labels)
                },
                &mut p,
                1e-5,
                200,
                seed,
            )
        }
        _ => {
            let mut p = vec![
                rand_tensor(&mut rng, vec![1, s, 3]),
                rand_tensor(&mut rng, vec![1, s, 3]),
            ];
            grad_check(
                |t, v| {
                    let x = t.concat_rows(&[v[0], v[1]])?;
                    let x = t.add(x, x)?;
                    let y = t.select_position(x, s - 1)?;
                    let y = t.reshape(y, vec![2, 3])?;
                    t.cross_entropy(y, &labels[..2])
                },
                &mut p,
                1e-5,
                200,
                seed,
            )
        }
    };
    report.unwrap().max_rel_error
}

fn criterion_1() -> Outcome {
    let mut errors = Vec::new();
    for i in 0..16 {
        errors.push(op_network(i % 5, 100 + i as u64));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(1);

    let mut layer = TransformerLayer::init(8, 2, 12, &mut rng);
    layer.visit_mut(&mut |_, t| {
        t.data_mut()
            .iter_mut()
            .for_each(|v| *v += rng.gen_range(-0.3..0.3))
    });
    let (_, mask) = random_batch(&mut rng, 2, 5, 4);
    let x: Vec<f64> = (0..80).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let w: Vec<f64> = (0..80).map(|_| rng.gen_range(-1.0..1.0)).collect();
    errors.push(
        grad_check_model(
            |t, l: &TransformerLayer| {
                let xv = t.constant(vec![2, 5, 8], x.clone())?;
                let y = l.forward(t, xv, &mask, &mut Dropout::off())?;
                let wv = t.constant(vec![2, 5, 8], w.clone())?;
                let y = t.mul(y, wv)?;
                t.sum(y)
            },
            &mut layer,
            1e-5,
            400,
            2,
        )
        .unwrap()
        .max_rel_error,
    );

    let mut model = spread_model(&tiny_config(2), 3);
    let (tokens, mask) = random_batch(&mut rng, 3, 6, 12);
    errors.push(
        grad_check_model(
            |t, m: &EncoderModel| {
                let l = m.forward(t, &tokens, &mask, &mut Dropout::off())?;
                t.cross_entropy(l, &[0, 2, 1])
            },
            &mut model,
            1e-5,
            400,
            4,
        )
        .unwrap()
        .max_rel_error,
    );

    // Replacement phase: predecessor branches frozen, successor branches trainable.
    let pred = spread_model(&tiny_config(4), 5);
    let mut hybrid = build_hybrid(&pred, &CompressionMap::uniform(4, 2).unwrap()).unwrap();
    hybrid.visit_mut(&mut |n, t| {
        if HybridModel::is_successor_param(n) {
            t.data_mut()
                .iter_mut()
                .for_each(|v| *v += rng.gen_range(-0.3..0.3));
        }
    });
    for bits in [[true, false], [false, true]] {
        let r = ReplacementMask {
            r: bits.to_vec(),
            p_used: 0.5,
            step: 0,
        };
        errors.push(
            grad_check_model(
                |t, h: &HybridModel| {
                    let l = h.forward(t, &tokens, &mask, &r, &mut Dropout::off())?;
                    t.cross_entropy(l, &[1, 0, 2])
                },
                &mut hybrid,
                1e-5,
                400,
                6,
            )
            .unwrap()
            .max_rel_error,
        );
    }
    let worst = errors.iter().cloned().fold(0.0, f64::max);
    check(
        errors.len() == 20 && worst <= 1e-4,
        format!("{} networks, max relative error {worst:.2e}", errors.len()),
    )
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut failures = 0;
    for i in 0..100 {
        let pred = spread_model(&tiny_config(4), i);
        let mut hybrid = build_hybrid(&pred, &CompressionMap::uniform(4, 2).unwrap()).unwrap();
        hybrid.visit_mut(&mut |n, t| {
            if HybridModel::is_successor_param(n) {
                t.data_mut()
                    .iter_mut()
                    .for_each(|v| *v += rng.gen_range(-0.3..0.3));
            }
        });
        let identity = build_hybrid(&pred, &CompressionMap::identity(4).unwrap()).unwrap();
        let batch = rng.gen_range(1..5);
        let (tokens, mask) = random_batch(&mut rng, batch, 6, 12);
        let expected = pred.logits(&tokens, &mask).unwrap();
        let bits = |v: Vec<f64>| v.into_iter().map(f64::to_bits).collect::<Vec<_>>();
        let zeros = hybrid
            .logits(&tokens, &mask, &ReplacementMask::all(2, false))
            .unwrap();
        let id_ones = identity
            .logits(&tokens, &mask, &ReplacementMask::all(4, true))
            .unwrap();
        let ones = hybrid
            .logits(&tokens, &mask, &ReplacementMask::all(2, true))
            .unwrap();
        let assembled = assemble_successor(&hybrid).logits(&tokens, &mask).unwrap();
        let ok = bits(zeros) == bits(expected.clone())
            && bits(id_ones) == bits(expected)
            && bits(assembled) == bits(ones.clone());
        failures += !ok as usize;
    }
    check(failures == 0, format!("100 inputs, {failures} mismatches"))
}

struct Shared {
    cfg: RunConfig,
    data: Dataset,
    predecessor: EncoderModel,
    predecessor_dev: f64,
}

fn criterion_3(shared: &Shared) -> Outcome {
    let hybrid = build_hybrid(&shared.predecessor, &shared.cfg.map).unwrap();
    let frozen = |h: &HybridModel| {
        h.named_hashes()
            .into_iter()
            .filter(|(n, _)| !HybridModel::is_successor_param(n))
            .collect::<Vec<_>>()
    };
    let before = frozen(&hybrid);
    let cfg = TrainConfig {
        max_steps: Some(2000),
        max_epochs: None,
        patience: usize::MAX,
        eval_every: 500,
        ..shared.cfg.stage(Stage::Compress, 0)
    };
    let out = compress(
        &shared.predecessor,
        &shared.data,
        &shared.cfg.map,
        &shared.cfg.scheduler,
        &cfg,
    )
    .unwrap();
    let after = frozen(&out.model);
    let changed = before.iter().zip(&after).filter(|(a, b)| a != b).count();
    let moved = out.model.named_hashes() != hybrid.named_hashes();
    check(
        out.steps_run == 2000 && before.len() == after.len() && changed == 0 && moved,
        format!(
            "{} steps, {} frozen tensors, {changed} changed, successor updated: {moved}",
            out.steps_run,
            before.len()
        ),
    )
}

fn criterion_4() -> Outcome {
    let pred = spread_model(&tiny_config(6), 40);
    let mut hybrid = build_hybrid(&pred, &CompressionMap::uniform(6, 2).unwrap()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    hybrid.visit_mut(&mut |n, t| {
        if HybridModel::is_successor_param(n) {
            t.data_mut()
                .iter_mut()
                .for_each(|v| *v += rng.gen_range(-0.5..0.5));
        }
    });
    let (tokens, mask) = random_batch(&mut rng, 4, 6, 12);
    let labels = [0, 1, 2, 1];
    let loss = |r: &ReplacementMask| {
        let mut tape = Tape::inference();
        let l = hybrid
            .forward(&mut tape, &tokens, &mask, r, &mut Dropout::off())
            .unwrap();
        let ce = tape.cross_entropy(l, &labels).unwrap();
        tape.value(ce)[0]
    };
    let p = 0.6;
    let exact: f64 = (0..8)
        .map(|code| {
            let r: Vec<bool> = (0..3).map(|i| code >> i & 1 == 1).collect();
            let prob: f64 = r.iter().map(|&b| if b { p } else { 1.0 - p }).product();
            prob * loss(&ReplacementMask {
                r,
                p_used: p,
                step: 0,
            })
        })
        .sum();
    let n = 20_000;
    let mut mask_rng = ChaCha8Rng::seed_from_u64(42);
    mask_rng.set_stream(11);
    let samples: Vec<f64> = (0..n)
        .map(|t| loss(&sample_mask(3, p, t, &mut mask_rng).unwrap()))
        .collect();
    let mean = samples.iter().sum::<f64>() / n as f64;
    let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let se = (var / n as f64).sqrt();
    let z = (mean - exact).abs() / se;
    check(
        z <= 3.0,
        format!("MC {mean:.6} vs exact {exact:.6}, |diff| = {z:.2} SE"),
    )
}

fn criterion_5() -> Outcome {
    let mut mismatches = 0u64;
    for b in [0.1, 0.3] {
        for reach in [1000u64, 5000, 10000, 30000] {
            let k = (1.0 - b) / reach as f64;
            assert_eq!(slope_reaching(b, reach).unwrap().to_bits(), k.to_bits());
            let curr = ReplacementScheduler::linear_reaching(b, reach).unwrap();
            let anti = ReplacementScheduler::anti_linear(k, b).unwrap();
            for t in 0..1_000_000u64 {
                let p = f64::min(1.0, k * t as f64 + b);
                mismatches += (curr.rate(t).to_bits() != p.to_bits()) as u64;
                mismatches += (anti.rate(t).to_bits() != (1.0 - p).to_bits()) as u64;
            }
        }
    }

    let config = tiny_config(4);
    let data = theseus_core::data::generate_synthetic(&theseus_core::data::SyntheticSpec {
        task: theseus_core::data::SyntheticTask::BracketBalance,
        train: 64,
        dev: 16,
        test: 16,
        seq_len: 6,
        vocab_size: 12,
        n_classes: 2,
        seed: 5,
    })
    .unwrap();
    let config = EncoderConfig {
        n_classes: 2,
        ..config
    };
    let pred = EncoderModel::init(&config, 0).unwrap();
    let lr = 3.7e-4;
    let cfg = TrainConfig {
        max_steps: Some(60),
        eval_every: 1,
        patience: usize::MAX,
        lr,
        batch_size: 8,
        ..TrainConfig::new(Stage::Compress)
    };
    let sched = ReplacementScheduler::linear_reaching(0.1, 40).unwrap();
    let out = compress(
        &pred,
        &data,
        &CompressionMap::uniform(4, 2).unwrap(),
        &sched,
        &cfg,
    )
    .unwrap();
    let mut logged = 0;
    for rec in out.metrics.records() {
        let p = rec.p_d.expect("compression logs p_d");
        mismatches += (p.to_bits() != sched.rate(rec.step).to_bits()) as u64;
        mismatches += (rec.lr_effective.to_bits() != (p * lr).to_bits()) as u64;
        mismatches += (equivalent_lr(lr, p).to_bits() != (p * lr).to_bits()) as u64;
        logged += 1;
    }
    check(
        mismatches == 0 && logged > 60,
        format!("8 schedules x 1e6 steps, {logged} logged records, {mismatches} mismatches"),
    )
}

fn criterion_6() -> Outcome {
    let (n, batches, p) = (6, 10_000u64, 0.5);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    rng.set_stream(11);
    let mut counts = vec![0u64; n];
    for t in 0..batches {
        let m = sample_mask(n, p, t, &mut rng).unwrap();
        for (c, &r) in counts.iter_mut().zip(&m.r) {
            *c += r as u64;
        }
    }
    let freqs: Vec<f64> = counts.iter().map(|&c| c as f64 / batches as f64).collect();
    let worst = freqs.iter().map(|f| (f - p).abs()).fold(0.0, f64::max);
    check(
        worst <= 0.015,
        format!("frequencies {freqs:.4?}, max deviation {worst:.4}"),
    )
}

fn criterion_7(shared: &Shared, hybrid_out: &mut Option<HybridModel>) -> Outcome {
    let Shared {
        cfg,
        data,
        predecessor,
        predecessor_dev,
    } = shared;
    let (mut theseus, mut baseline) = (Vec::new(), Vec::new());
    for seed in cfg.seeds() {
        let run = experiment::theseus_run(cfg, data, predecessor, &cfg.map, &cfg.scheduler, seed)
            .unwrap();
        theseus.push(run.successor_dev.accuracy);
        if hybrid_out.is_none() {
            *hybrid_out = Some(run.hybrid);
        }
        let b = experiment::truncated_baseline(
            cfg,
            data,
            predecessor,
            cfg.map.successor_layers(),
            seed,
        )
        .unwrap();
        baseline.push(evaluate(&b.model, &data.dev).unwrap().accuracy);
    }
    let (t, b) = (median(&theseus), median(&baseline));
    let retention = t / predecessor_dev;
    check(
        *predecessor_dev >= 0.95 && t >= b && retention >= 0.90,
        format!(
            "predecessor {predecessor_dev:.3}, theseus median {t:.3} {theseus:?}, truncated median {b:.3} {baseline:?}, retention {retention:.3}"
        ),
    )
}

fn criterion_8(shared: &Shared) -> Outcome {
    let cmp = experiment::compare_schedulers(
        &shared.cfg,
        &shared.data,
        &shared.predecessor,
        &shared.cfg.seeds(),
    )
    .unwrap();
    let (c, k, a) = (
        median(&cmp.curriculum),
        median(cmp.best_constant_accuracies()),
        median(&cmp.anti),
    );
    check(
        c >= k && k >= a && c - a > 0.0,
        format!(
            "curriculum {c:.3}, constant(p={}) {k:.3}, anti {a:.3}",
            cmp.best_constant
        ),
    )
}

/// Per-layer cost of a post-LN encoder layer, written out from its matmuls.
fn reference_flops(c: &EncoderConfig, s: usize) -> u64 {
    let (s, d, f, k) = (
        s as u64,
        c.d_model as u64,
        c.d_ff as u64,
        c.n_classes as u64,
    );
    let projections = 4 * 2 * s * d * d;
    let attention = 2 * 2 * s * s * d;
    let ffn = 2 * 2 * s * d * f;
    c.n_layers as u64 * (projections + attention + ffn) + s * d + 2 * d * k + k
}

fn criterion_9(shared: &Shared) -> Outcome {
    let base = shared.predecessor.config.clone();
    let s = base.max_seq_len;
    let mut ratios = Vec::new();
    let mut formula_ok = true;
    for (n, window) in [(4, (1.8, 2.1)), (6, (2.6, 3.1)), (8, (3.4, 4.1))] {
        let c = base.with_layers(n);
        formula_ok &= count_flops(&c, s) == reference_flops(&c, s)
            && count_flops(&c.with_layers(2), s) == reference_flops(&c.with_layers(2), s);
        let r = experiment::flop_ratio(&c, 2, s);
        ratios.push((n, r, r > window.0 && r < window.1));
    }
    let successor = shared.predecessor.truncated(2).unwrap();
    let bench = experiment::speed_bench(&shared.predecessor, &successor, 32, 30).unwrap();
    let ok = formula_ok && ratios.iter().all(|x| x.2) && bench.wall_ratio >= 1.6;
    let flops = ratios
        .iter()
        .map(|(n, r, _)| format!("{n}:2 {r:.3}"))
        .collect::<Vec<_>>()
        .join(", ");
    check(
        ok,
        format!("FLOP ratios {flops}; formula matches reference: {formula_ok}; wall-clock 4:2 at batch 32 {:.2}", bench.wall_ratio),
    )
}

fn read_rows(path: &std::path::Path) -> Vec<csv::StringRecord> {
    csv::Reader::from_path(path)
        .unwrap()
        .records()
        .map(Result::unwrap)
        .collect()
}

fn criterion_10(shared: &Shared, hybrid: &HybridModel) -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let pred_path = dir.path().join("predecessor.ckpt");
    shared.predecessor.to_checkpoint().save(&pred_path).unwrap();
    let identity_path = dir.path().join("identity.ckpt");
    let identity = build_hybrid(
        &shared.predecessor,
        &CompressionMap::identity(shared.predecessor.n_layers()).unwrap(),
    )
    .unwrap();
    identity.to_checkpoint().save(&identity_path).unwrap();
    let real_path = dir.path().join("hybrid.ckpt");
    hybrid.to_checkpoint().save(&real_path).unwrap();

    let id_csv = commands::analyze_replacement(
        &shared.cfg,
        &pred_path,
        &identity_path,
        &dir.path().join("id"),
        false,
    )
    .unwrap();
    let id_rows = read_rows(&id_csv);
    let zero = id_rows.len() == identity.n_modules()
        && id_rows.iter().all(|r| r[4].parse::<f64>().unwrap() == 0.0);

    let real_csv = commands::analyze_replacement(
        &shared.cfg,
        &pred_path,
        &real_path,
        &dir.path().join("real"),
        false,
    )
    .unwrap();
    let real_rows = read_rows(&real_csv);
    let finite = real_rows.len() == hybrid.n_modules()
        && real_rows.iter().all(|r| {
            r[3].parse::<f64>().unwrap().is_finite() && r[4].parse::<f64>().unwrap().is_finite()
        });
    let deltas = real_rows
        .iter()
        .map(|r| r[4].to_string())
        .collect::<Vec<_>>()
        .join(", ");
    check(
        zero && finite,
        format!("identity: {} rows all zero: {zero}; compressed: {} finite rows: {finite} (deltas {deltas})", id_rows.len(), real_rows.len()),
    )
}

fn main() -> ExitCode {
    let mut failed = 0;
    let mut report = |n: usize, started: Instant, outcome: Outcome| {
        let secs = started.elapsed().as_secs_f64();
        match outcome {
            Ok(d) => println!("criterion {n:>2}: PASS ({secs:.1}s) {d}"),
            Err(d) => {
                failed += 1;
                println!("criterion {n:>2}: FAIL ({secs:.1}s) {d}");
            }
        }
    };

    let t = Instant::now();
    report(1, t, criterion_1());
    let t = Instant::now();
    report(2, t, criterion_2());

    let t = Instant::now();
    let cfg = RunConfig::default();
    let data = experiment::load_data(&cfg).unwrap();
    let trained = experiment::train_fresh_predecessor(&cfg, &data, cfg.seed).unwrap();
    let predecessor_dev = evaluate(&trained.model, &data.dev).unwrap().accuracy;
    println!(
        "predecessor trained in {:.1}s, dev accuracy {predecessor_dev:.3}",
        t.elapsed().as_secs_f64()
    );
    let shared = Shared {
        cfg,
        data,
        predecessor: trained.model,
        predecessor_dev,
    };

    let t = Instant::now();
    report(3, t, criterion_3(&shared));
    let t = Instant::now();
    report(4, t, criterion_4());
    let t = Instant::now();
    report(5, t, criterion_5());
    let t = Instant::now();
    report(6, t, criterion_6());
    let mut hybrid = None;
    let t = Instant::now();
    report(7, t, criterion_7(&shared, &mut hybrid));
    let t = Instant::now();
    report(8, t, criterion_8(&shared));
    let t = Instant::now();
    report(9, t, criterion_9(&shared));
    let t = Instant::now();
    report(
        10,
        t,
        criterion_10(
            &shared,
            hybrid.as_ref().expect("criterion 7 produced a hybrid"),
        ),
    );

    println!("{} of 10 criteria passed", 10 - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
