use theseus_core::checkpoint::Checkpoint;
use theseus_core::data::{generate_synthetic, Dataset, SyntheticSpec, SyntheticTask};
use theseus_core::model::{EncoderConfig, EncoderModel};
use theseus_core::tensor::Parameters;
use theseus_core::theseus::{
    assemble_successor, CompressionMap, HybridModel, Phase, ReplacementScheduler,
};
use theseus_core::training::{
    compress, evaluate, finetune_successor, train_predecessor, MaskedHybrid, Stage, TrainConfig,
};

fn data(task: SyntheticTask, seed: u64) -> Dataset {
    generate_synthetic(&SyntheticSpec {
        task,
        train: 160,
        dev: 48,
        test: 48,
        seq_len: 9,
        vocab_size: 10,
        n_classes: 2,
        seed,
    })
    .unwrap()
}

fn config(d: &Dataset) -> EncoderConfig {
    EncoderConfig {
        vocab_size: d.vocab_size,
        max_seq_len: 9,
        d_model: 16,
        n_heads: 2,
        d_ff: 32,
        n_layers: 4,
        n_classes: d.n_classes,
        dropout_rate: 0.0,
    }
}

fn stage(stage: Stage, steps: u64) -> TrainConfig {
    TrainConfig {
        max_steps: Some(steps),
        eval_every: 10,
        batch_size: 16,
        ..TrainConfig::new(stage)
    }
}

#[test]
fn predecessor_to_successor_through_checkpoint_files() {
    let d = data(SyntheticTask::BracketBalance, 3);
    let pred = train_predecessor(
        EncoderModel::init(&config(&d), 1).unwrap(),
        &d,
        &stage(Stage::Predecessor, 40),
    )
    .unwrap();
    let dir = tempfile::tempdir().unwrap();

    let path = dir.path().join("pred.ckpt");
    pred.model.to_checkpoint().save(&path).unwrap();
    let pred_back = EncoderModel::from_checkpoint(&Checkpoint::load(&path).unwrap()).unwrap();
    assert_eq!(pred_back, pred.model);

    let map = CompressionMap::uniform(4, 2).unwrap();
    let sched = ReplacementScheduler::linear_reaching(0.3, 20).unwrap();
    let c = compress(&pred_back, &d, &map, &sched, &stage(Stage::Compress, 30)).unwrap();
    assert_eq!(c.model.phase(), Phase::Replacement);

    let path = dir.path().join("hybrid.ckpt");
    c.model.to_checkpoint().save(&path).unwrap();
    let hybrid = HybridModel::from_checkpoint(&Checkpoint::load(&path).unwrap()).unwrap();
    assert_eq!(hybrid, c.model);

    let successor = assemble_successor(&hybrid);
    assert_eq!(successor.n_layers(), 2);
    let via_hybrid = evaluate(&MaskedHybrid::successor(&hybrid), &d.dev).unwrap();
    let direct = evaluate(&successor, &d.dev).unwrap();
    assert_eq!(via_hybrid, direct);

    let f = finetune_successor(successor, &d, &stage(Stage::Finetune, 20)).unwrap();
    let test = evaluate(&f.model, &d.test).unwrap();
    assert!(test.loss.is_finite());
    assert!(f.model.param_count() < pred.model.param_count());
}

#[test]
fn every_task_generates_and_trains() {
    for task in [
        SyntheticTask::MajorityToken,
        SyntheticTask::BracketBalance,
        SyntheticTask::KeyedLookup,
    ] {
        let d = data(task, 11);
        assert_eq!(d, data(task, 11), "{task} is not deterministic");
        let out = train_predecessor(
            EncoderModel::init(&config(&d), 0).unwrap(),
            &d,
            &stage(Stage::Predecessor, 10),
        )
        .unwrap();
        assert!(out.best_dev.unwrap().loss.is_finite(), "{task}");
    }
}

#[test]
fn runs_are_reproducible() {
    let d = data(SyntheticTask::MajorityToken, 5);
    let run = || {
        let pred = train_predecessor(
            EncoderModel::init(&config(&d), 2).unwrap(),
            &d,
            &stage(Stage::Predecessor, 20),
        )
        .unwrap();
        let sched = ReplacementScheduler::constant(0.5).unwrap();
        let c = compress(
            &pred.model,
            &d,
            &CompressionMap::uniform(4, 2).unwrap(),
            &sched,
            &stage(Stage::Compress, 20),
        )
        .unwrap();
        (
            c.model.to_checkpoint().to_bytes(),
            c.metrics.without_wall_clock(),
        )
    };
    assert_eq!(run(), run());
}
