mod common;

use std::path::Path;

use empt_core::checkpoint::{self, VocabRef};
use empt_core::corpus::{groups, TrainingSample};
use empt_core::input::build_input;
use empt_core::model::Params;
use empt_core::trainer::{self, adam_step, clip_global_norm, OutputDir, StepMetrics, TrainConfig, Trainer};
use empt_core::Error;
use empt_tensor::Tape;
use proptest::prelude::*;

use common::{tiny_config, toy, Toy};

fn setup(dir: &Path, t: &Toy) -> OutputDir {
    std::fs::create_dir_all(dir).unwrap();
    let vocab_path = dir.join("vocab.json");
    t.vocab.save(&vocab_path).unwrap();
    OutputDir {
        dir: dir.join("run"),
        vocab: VocabRef::for_file(&vocab_path).unwrap(),
    }
}

fn small_train(steps: u64) -> TrainConfig {
    TrainConfig {
        lr: 1e-3,
        batch_size: 2,
        grad_accum_steps: 2,
        epochs: 50,
        max_steps: Some(steps),
        ..Default::default()
    }
}

fn read_metrics(path: &Path) -> Vec<StepMetrics> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn accumulated_step_equals_one_large_batch() {
    let t = toy(6, 3);
    let cfg = tiny_config(&t.vocab);
    let params = Params::<f32>::init(&cfg, 7).unwrap();
    let tc = TrainConfig {
        lr: 1e-2,
        batch_size: 4,
        grad_accum_steps: 8,
        ..Default::default()
    };
    let mut accumulated = Trainer::new(params.clone(), tc.clone(), 5).unwrap();
    let ranges = groups(&t.samples);
    let ids = accumulated.step_groups(ranges.len(), 0);
    let batch: Vec<&[TrainingSample]> = ids.iter().map(|&g| &t.samples[ranges[g].clone()]).collect();
    assert!(batch.len() > 4, "needs more than one micro-batch");
    accumulated.train_step(&t.vocab, &batch, 10).unwrap();

    // One tape over the whole batch, same dropout stream, one backward.
    let opts = cfg.input_options();
    let mut tape = Tape::new();
    let b = params.bind(&mut tape, true);
    let mut rng = empt_core::rng::stream(5, empt_core::rng::Purpose::Dropout, 0);
    let mut total = None;
    for g in &batch {
        let group: Vec<_> = g.iter().map(|s| (s, build_input(s, &t.vocab, &opts).unwrap())).collect();
        let (loss, _) = params.group_loss(&mut tape, &b, &group, Some(&mut rng)).unwrap();
        total = Some(match total {
            None => loss,
            Some(acc) => tape.add(acc, loss).unwrap(),
        });
    }
    let mean = tape.scale(total.unwrap(), 1.0 / batch.len() as f32);
    tape.backward(mean).unwrap();
    let mut grads: Vec<Vec<f32>> = b.vars().iter().map(|&v| tape.grad(v).unwrap().to_vec()).collect();
    drop(tape);
    clip_global_norm(&mut grads, tc.clip_norm);
    let mut large = params.clone();
    let names = large.names().to_vec();
    let mut state = trainer::AdamState::new(large.tensors());
    adam_step(large.tensors_mut(), &names, &grads, &mut state, trainer::schedule_lr(0, 10, tc.lr), &tc).unwrap();

    for (a, l) in accumulated.params.tensors().iter().zip(large.tensors()) {
        for (x, y) in a.data().iter().zip(l.data()) {
            assert!((x - y).abs() <= 1e-6, "{x} vs {y}");
        }
    }
}

#[test]
fn seeded_runs_write_identical_checkpoints() {
    let t = toy(5, 1);
    let tmp = tempfile::tempdir().unwrap();
    let mut files = Vec::new();
    for run in ["a", "b"] {
        let out = setup(&tmp.path().join(run), &t);
        let params = Params::<f32>::init(&tiny_config(&t.vocab), 3).unwrap();
        let mut tr = Trainer::new(params, small_train(4), 11).unwrap();
        tr.run(&t.vocab, &t.samples, Some(&out), |_| {}).unwrap();
        files.push((
            std::fs::read(out.dir.join("model.ckpt")).unwrap(),
            std::fs::read_to_string(out.dir.join("metrics.jsonl")).unwrap(),
        ));
    }
    assert_eq!(files[0].0, files[1].0);
    assert_eq!(files[0].1, files[1].1);
}

#[test]
fn resuming_reproduces_the_metric_log() {
    let t = toy(5, 2);
    let tmp = tempfile::tempdir().unwrap();
    let out = setup(&tmp.path().join("full"), &t);
    let tc = TrainConfig {
        checkpoint_every: 3,
        ..small_train(7)
    };
    let params = Params::<f32>::init(&tiny_config(&t.vocab), 3).unwrap();
    let mut tr = Trainer::new(params, tc.clone(), 13).unwrap();
    tr.run(&t.vocab, &t.samples, Some(&out), |_| {}).unwrap();
    let full = read_metrics(&out.dir.join("metrics.jsonl"));
    assert_eq!(full.len(), 7);

    let resumed_out = OutputDir {
        dir: tmp.path().join("resumed"),
        ..out.clone()
    };
    let mut tr = Trainer::resume(out.dir.join("ckpt-000003.ckpt"), tc, 13).unwrap();
    assert_eq!(tr.step(), 3);
    tr.run(&t.vocab, &t.samples, Some(&resumed_out), |_| {}).unwrap();
    let tail = read_metrics(&resumed_out.dir.join("metrics.jsonl"));
    assert_eq!(tail, full[3..]);
    assert_eq!(
        std::fs::read(out.dir.join("model.ckpt")).unwrap(),
        std::fs::read(resumed_out.dir.join("model.ckpt")).unwrap()
    );
}

#[test]
fn learning_rate_decays_and_norms_are_clipped() {
    let t = toy(5, 2);
    let params = Params::<f32>::init(&tiny_config(&t.vocab), 3).unwrap();
    let mut tr = Trainer::new(params, small_train(6), 1).unwrap();
    let log = tr.run(&t.vocab, &t.samples, None, |_| {}).unwrap();
    assert_eq!(log.len(), 6);
    for w in log.windows(2) {
        assert!(w[1].lr <= w[0].lr);
    }
    assert!(log.iter().all(|m| m.total.is_finite() && m.l1.is_some() && m.l2.is_some() && m.l3.is_some()));
    assert!(tr.params.tensors().iter().all(|p| p.is_finite()));
    assert!(tr.adam.m.iter().chain(&tr.adam.v).flatten().all(|x| x.is_finite()));
}

#[test]
fn nan_loss_halts_and_keeps_the_last_good_state() {
    let t = toy(5, 2);
    let tmp = tempfile::tempdir().unwrap();
    let out = setup(tmp.path(), &t);
    let mut params = Params::<f32>::init(&tiny_config(&t.vocab), 3).unwrap();
    params.get_mut("pos_emb").unwrap().data_mut()[0] = f32::NAN;
    let mut tr = Trainer::new(params.clone(), small_train(4), 1).unwrap();
    let err = tr.run(&t.vocab, &t.samples, Some(&out), |_| {}).unwrap_err();
    assert!(matches!(err, Error::NonFinite { step: 0, .. }), "{err}");
    let saved = checkpoint::load(&out.dir.join("last-good.ckpt")).unwrap();
    assert_eq!(saved.sidecar.step, 0);
    assert_eq!(saved.params.names(), params.names());
}

#[test]
fn checkpoint_round_trips_and_checks_the_vocabulary() {
    let t = toy(4, 2);
    let tmp = tempfile::tempdir().unwrap();
    let out = setup(tmp.path(), &t);
    let params = Params::<f32>::init(&tiny_config(&t.vocab), 3).unwrap();
    let mut tr = Trainer::new(params, small_train(2), 1).unwrap();
    tr.run(&t.vocab, &t.samples, Some(&out), |_| {}).unwrap();
    let ckpt = out.dir.join("model.ckpt");
    let loaded = checkpoint::load(&ckpt).unwrap();
    assert_eq!(loaded.params, tr.params);
    assert_eq!(loaded.adam.as_ref(), Some(&tr.adam));
    assert_eq!(loaded.sidecar.step, 2);
    let (vocab, _) = checkpoint::load_vocab(&ckpt, &loaded.sidecar).unwrap();
    assert_eq!(vocab.to_json(), t.vocab.to_json());

    std::fs::write(tmp.path().join("vocab.json"), "{}").unwrap();
    assert!(checkpoint::load_vocab(&ckpt, &loaded.sidecar).is_err());
}

proptest! {
    #[test]
    fn clipped_norm_never_exceeds_the_bound(
        grads in prop::collection::vec(prop::collection::vec(-100.0f64..100.0, 0..20), 1..5),
        max in 0.01f64..10.0,
    ) {
        let mut g = grads.clone();
        let before = clip_global_norm(&mut g, max);
        let after = g.iter().flatten().map(|x| x * x).sum::<f64>().sqrt();
        prop_assert!(after <= max + 1e-9);
        if before <= max {
            prop_assert_eq!(g, grads);
        }
    }

    #[test]
    fn schedule_is_non_increasing(total in 1u64..1000, base in 1e-6f64..1.0) {
        let mut prev = f64::INFINITY;
        for s in 0..=total {
            let lr = trainer::schedule_lr(s, total, base);
            prop_assert!(lr <= prev && lr >= 0.0);
            prev = lr;
        }
    }
}
