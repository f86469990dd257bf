use std::fs;

use refsr_core::data::{synthetic_pairs, ImagePair};
use refsr_core::model::{Checkpoint, CropMode, Model, ModelConfig};
use refsr_core::numerics::{Binder, Scalar, Tape};
use refsr_core::training::trainer::{CHECKPOINT_FILE, LOG_FILE};
use refsr_core::training::{read_log, train_loop, StepRecord, TrainConfig, Trainer};
use refsr_core::Error;

fn pairs(n: usize, seed: u64) -> Vec<ImagePair> {
    synthetic_pairs(n, ModelConfig::desk().lr_input_size, seed).unwrap()
}

fn config(steps: u64) -> TrainConfig {
    TrainConfig {
        steps,
        batch_size: 1,
        checkpoint_every: 2,
        seed: 3,
        ..TrainConfig::default()
    }
}

fn trainer(mode: &str, steps: u64, data: Vec<ImagePair>) -> Trainer<f32> {
    let cfg = ModelConfig {
        ablation: mode.into(),
        ..ModelConfig::desk()
    };
    Trainer::new(Model::new(cfg, 1).unwrap(), data, config(steps)).unwrap()
}

#[test]
fn ten_steps_log_ten_finite_records_and_move_the_gates() {
    let dir = tempfile::tempdir().unwrap();
    let mut t = trainer("full", 10, pairs(1, 10));
    let before = t.model.lambdas();
    let summary = train_loop(&mut t, dir.path()).unwrap();
    assert_eq!(summary.records.len(), 10);
    let log = read_log(&dir.path().join(LOG_FILE)).unwrap();
    assert_eq!(log.len(), 10);
    assert!(log.iter().all(|(_, lr, loss)| lr.is_finite() && loss.is_finite()));
    assert_eq!(log.iter().map(|r| r.0).collect::<Vec<_>>(), (0..10).collect::<Vec<_>>());
    assert!(dir.path().join(CHECKPOINT_FILE).exists());
    let after = t.model.lambdas();
    assert!(before.iter().zip(&after).any(|(a, b)| a.1 != b.1), "gate logits did not move");
}

#[test]
fn frozen_gate_logits_stay_put() {
    let mut t = trainer("frozen-gate", 2, pairs(1, 11));
    let before = t.model.lambdas();
    while !t.is_done() {
        t.step().unwrap();
    }
    assert_eq!(before, t.model.lambdas());
    assert!(t.model.lambdas().values().flatten().all(|&l| l == 0.0));
}

#[test]
fn resumed_training_matches_unbroken_training() {
    let data = pairs(2, 12);
    let mut unbroken = trainer("full", 4, data.clone());
    let full: Vec<StepRecord> = (0..4).map(|_| unbroken.step().unwrap()).collect();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mid.bin");
    let mut first = trainer("full", 4, data.clone());
    let mut records: Vec<StepRecord> = (0..2).map(|_| first.step().unwrap()).collect();
    let ck = first.checkpoint();
    ck.save(&path).unwrap();
    let loaded = Checkpoint::<f32>::load(&path).unwrap();
    let again = dir.path().join("again.bin");
    loaded.save(&again).unwrap();
    assert_eq!(fs::read(&path).unwrap(), fs::read(&again).unwrap());

    let mut resumed = Trainer::resume(&loaded, data, config(4)).unwrap();
    assert_eq!(resumed.step, 2);
    records.extend((0..2).map(|_| resumed.step().unwrap()));
    assert_eq!(records, full);

    let (a, b) = (dir.path().join("a.bin"), dir.path().join("b.bin"));
    unbroken.checkpoint().save(&a).unwrap();
    resumed.checkpoint().save(&b).unwrap();
    assert_eq!(fs::read(a).unwrap(), fs::read(b).unwrap());
}

#[test]
fn resume_rejects_a_different_schedule() {
    let mut t = trainer("full", 2, pairs(1, 13));
    t.step().unwrap();
    let err = Trainer::resume(&t.checkpoint(), pairs(1, 13), config(5)).err().unwrap();
    assert!(matches!(err, Error::Argument(_)));
}

#[test]
fn non_finite_loss_aborts_and_keeps_the_last_good_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let mut t = trainer("full", 2, pairs(1, 14));
    train_loop(&mut t, dir.path()).unwrap();
    let ck_path = dir.path().join(CHECKPOINT_FILE);
    let good = fs::read(&ck_path).unwrap();

    t.config.steps = 4;
    let head = t.model.head.weight;
    t.model.store.get_mut(head).value.data_mut()[0] = f32::NAN;
    let err = train_loop(&mut t, dir.path()).unwrap_err();
    assert!(matches!(err, Error::NonFinite { .. }), "{err}");
    assert_eq!(fs::read(&ck_path).unwrap(), good);
    assert_eq!(read_log(&dir.path().join(LOG_FILE)).unwrap().len(), 2);
    assert!(Checkpoint::<f32>::load(&ck_path).is_ok());
}

fn fixed_batch_loss(model: &Model<f32>, pair: &ImagePair) -> f64 {
    let crops: Vec<_> = model
        .reference_crops(&pair.reference, CropMode::Centre)
        .unwrap()
        .into_iter()
        .map(|c| c.0)
        .collect();
    let mut tape = Tape::new();
    let mut b = Binder::new(&model.store);
    let out = model.forward(&mut tape, &mut b, &pair.lr, &crops, None).unwrap();
    let target = tape.constant(pair.hr.to_tokens::<f32>());
    let loss = tape.l1_mean(out, target).unwrap();
    tape.value(loss).item().as_f64()
}

#[test]
fn loss_on_a_fixed_batch_falls_within_200_steps() {
    let data = pairs(1, 15);
    let mut t = trainer("full", 200, data.clone());
    let initial = fixed_batch_loss(&t.model, &data[0]);
    while !t.is_done() {
        t.step().unwrap();
    }
    let last = fixed_batch_loss(&t.model, &data[0]);
    assert!(last < initial, "loss {initial} -> {last}");
}

#[test]
fn schedule_in_log_follows_one_cycle() {
    let dir = tempfile::tempdir().unwrap();
    let mut t = trainer("self-only", 3, pairs(1, 16));
    train_loop(&mut t, dir.path()).unwrap();
    let lrs: Vec<f64> = read_log(&dir.path().join(LOG_FILE)).unwrap().iter().map(|r| r.1).collect();
    assert_eq!(lrs.len(), 3);
    assert!((lrs[0] - 1e-4 / 25.0).abs() < 1e-12);
    assert!(lrs.iter().all(|&lr| lr <= 1e-4));
}
