mod common;

use empt_core::corpus::{groups, Source};
use empt_core::decoder::{self, ReplyConditioning, SamplingParams};
use empt_core::input::{build_input, sample_history, InputRepr};
use empt_core::model::{random_input, Bound, HeadVariant, ModelConfig, Params};
use empt_core::rng::{self, Purpose};
use empt_core::{Act, Emotion, Special, Topic};
use empt_tensor::gradcheck::GradCheck;
use empt_tensor::{Tape, Tensor};

use common::{tiny_config, toy};

fn no_dropout(mut c: ModelConfig) -> ModelConfig {
    c.embd_dropout = 0.0;
    c.resid_dropout = 0.0;
    c.attn_dropout = 0.0;
    c
}

#[test]
fn perturbing_a_position_leaves_earlier_logits_unchanged() {
    let t = toy(4, 1);
    let cfg = tiny_config(&t.vocab);
    let params = Params::<f32>::init(&cfg, 3).unwrap();
    let mut r = rng::stream(5, Purpose::Synthetic, 9);
    let base = random_input(&cfg, 32, &mut r);
    let before = params.forward(&base, None).unwrap().lm_logits;
    for j in [0usize, 5, 17, 31] {
        let mut changed = base.clone();
        changed.token_ids[j] = (changed.token_ids[j] + 1) % cfg.vocab_size as u32;
        changed.emotion_ids[j] = (changed.emotion_ids[j] + 1) % 8;
        let after = params.forward(&changed, None).unwrap().lm_logits;
        let v = cfg.vocab_size;
        let row = |t: &Tensor<f32>, i: usize| t.data()[i * v..(i + 1) * v].to_vec();
        for i in 0..j {
            assert_eq!(row(&before, i), row(&after, i), "row {i} moved when position {j} changed");
        }
        assert_ne!(row(&before, j), row(&after, j));
    }
}

#[test]
fn lm_head_is_the_token_embedding() {
    let t = toy(4, 1);
    let params = Params::<f32>::init(&tiny_config(&t.vocab), 3).unwrap();
    assert!(std::ptr::eq(params.lm_head(), params.token_embedding()));

    // A target absent from the input still gets an embedding gradient,
    // which can only arrive through the output projection.
    let input = build_input(&t.samples[0], &t.vocab, &params.config().input_options()).unwrap();
    let absent = (Special::COUNT as u32..t.vocab.len() as u32)
        .find(|id| !input.token_ids.contains(id))
        .unwrap() as usize;
    let mut tape = Tape::new();
    let b = params.bind(&mut tape, true);
    let h = params.hidden(&mut tape, &b, &input, None).unwrap();
    let z = params.lm_logits(&mut tape, &b, h, &[input.candidate_start]).unwrap();
    let loss = tape.cross_entropy(z, &[absent]).unwrap();
    tape.backward(loss).unwrap();
    let d = params.config().d_model;
    let g = tape.grad(params.token_embedding_var(&b)).unwrap();
    assert!(g[absent * d..(absent + 1) * d].iter().any(|&x| x != 0.0));
}

fn gradcheck_group(variant: HeadVariant, stub: bool) {
    let t = toy(3, 2);
    let mut cfg = no_dropout(tiny_config(&t.vocab));
    cfg.head_variant = variant;
    cfg.emotion_stub_readout = stub;
    cfg.max_positions = 40;
    let params = Params::<f64>::init(&cfg, 11).unwrap();
    let opts = cfg.input_options();
    let range = groups(&t.samples)[1].clone();
    let group: Vec<_> = t.samples[range]
        .iter()
        .map(|s| (s, build_input(s, &t.vocab, &opts).unwrap()))
        .collect();
    // The loss sums many terms, so the difference quotient carries about
    // 1e-10 of round-off; a 1e-5 floor keeps that from dominating tiny
    // partials.
    let check = GradCheck { step: 1e-5, floor: 1e-5 };
    let report = check
        .run(params.tensors(), |tape, vars| {
            let b = Bound::from_vars(vars.to_vec());
            Ok(params.group_loss(tape, &b, &group, None).expect("group loss").0)
        })
        .unwrap();
    let (i, j) = report.worst;
    assert!(
        report.max_rel_error < 1e-4,
        "{variant:?}: {} at {:?}: analytic {} numeric {}",
        report.max_rel_error,
        report.worst,
        report.analytic[i][j],
        report.numeric[i][j]
    );
}

#[test]
fn binary_losses_match_finite_differences() {
    gradcheck_group(HeadVariant::Binary, true);
}

#[test]
fn multiple_choice_losses_match_finite_differences() {
    gradcheck_group(HeadVariant::MultipleChoice, false);
}

#[test]
fn total_is_the_weighted_sum_of_terms() {
    let t = toy(3, 4);
    let mut cfg = no_dropout(tiny_config(&t.vocab));
    cfg.c1 = 0.5;
    cfg.c2 = 2.0;
    cfg.c3 = 0.25;
    let params = Params::<f64>::init(&cfg, 1).unwrap();
    let opts = cfg.input_options();
    for r in groups(&t.samples) {
        let group: Vec<_> = t.samples[r].iter().map(|s| (s, build_input(s, &t.vocab, &opts).unwrap())).collect();
        let mut tape = Tape::new();
        let b = params.bind(&mut tape, false);
        let (_, rep) = params.group_loss(&mut tape, &b, &group, None).unwrap();
        let want = 0.5 * rep.l1.unwrap() + 2.0 * rep.l2.unwrap() + 0.25 * rep.l3.unwrap();
        assert!((rep.total - want).abs() < 1e-12);
    }
}

#[test]
fn utterance_distractors_carry_no_lm_loss() {
    let t = toy(3, 4);
    let cfg = no_dropout(tiny_config(&t.vocab));
    let params = Params::<f64>::init(&cfg, 1).unwrap();
    let opts = cfg.input_options();
    let d = t.samples.iter().find(|s| s.source == Source::UtteranceDistractor).unwrap();
    let group = vec![(d, build_input(d, &t.vocab, &opts).unwrap())];
    let mut tape = Tape::new();
    let b = params.bind(&mut tape, false);
    let (_, rep) = params.group_loss(&mut tape, &b, &group, None).unwrap();
    assert_eq!(rep.l1, None);
    assert_eq!(rep.l3, None);
    assert!(rep.l2.is_some());
}

#[test]
fn emotion_scores_are_sorted_and_open() {
    let t = toy(3, 4);
    let params = Params::<f32>::init(&tiny_config(&t.vocab), 1).unwrap();
    let history = sample_history(&t.samples[0]);
    let scores = params.predict_emotion(&t.vocab, Topic::Work, &history, Some(Act::Inform)).unwrap();
    assert_eq!(scores.len(), Emotion::COUNT);
    for w in scores.windows(2) {
        assert!(w[0].margin >= w[1].margin);
    }
    assert!(scores.iter().all(|s| s.score > 0.0 && s.score < 1.0));
    let empty = params.predict_emotion(&t.vocab, Topic::Work, &[], None).unwrap();
    assert_eq!(empty.len(), Emotion::COUNT);
}

#[test]
fn generation_is_seeded() {
    let t = toy(3, 4);
    let params = Params::<f32>::init(&tiny_config(&t.vocab), 1).unwrap();
    let history = sample_history(&t.samples[0]);
    let cond = ReplyConditioning {
        topic: Topic::Health,
        emotion: Some(Emotion::Happiness),
        act: Some(Act::Inform),
    };
    let sp = SamplingParams {
        max_new_tokens: 12,
        seed: 9,
        ..Default::default()
    };
    let a = decoder::generate(&params, &t.vocab, &history, cond, &sp, 0).unwrap();
    let b = decoder::generate(&params, &t.vocab, &history, cond, &sp, 0).unwrap();
    assert_eq!(a, b);
    assert!(a.token_ids.len() <= 12);
    assert!(a.token_ids.iter().all(|&id| !t.vocab.is_special(id)));
}

#[test]
fn certain_eos_gives_an_empty_reply() {
    let t = toy(3, 4);
    let cfg = tiny_config(&t.vocab);
    let mut params = Params::<f32>::init(&cfg, 1).unwrap();
    let d = cfg.d_model;
    let dir: Vec<f32> = (0..d).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
    params.get_mut("ln_f.gain").unwrap().data_mut().fill(0.0);
    params.get_mut("ln_f.bias").unwrap().data_mut().copy_from_slice(&dir);
    let eos = Special::Eos.id() as usize;
    let emb = params.get_mut("tok_emb").unwrap().data_mut();
    emb.fill(0.0);
    for (i, x) in dir.iter().enumerate() {
        emb[eos * d + i] = 100.0 * x;
    }
    let cond = ReplyConditioning {
        topic: Topic::Work,
        emotion: None,
        act: None,
    };
    let out = decoder::generate(&params, &t.vocab, &[], cond, &SamplingParams::default(), 0).unwrap();
    assert!(out.finished);
    assert!(out.token_ids.is_empty());
    assert_eq!(out.text, "");
}

#[test]
fn overlong_context_is_an_error() {
    let t = toy(3, 4);
    let mut cfg = tiny_config(&t.vocab);
    cfg.max_positions = 16;
    let params = Params::<f32>::init(&cfg, 1).unwrap();
    let sp = SamplingParams {
        max_new_tokens: 20,
        ..Default::default()
    };
    let cond = ReplyConditioning {
        topic: Topic::Work,
        emotion: None,
        act: None,
    };
    let err = decoder::generate(&params, &t.vocab, &[], cond, &sp, 0).unwrap_err();
    assert_eq!(err.kind(), "overflow");

    let mut r = rng::stream(1, Purpose::Synthetic, 0);
    let long: InputRepr = random_input(&cfg, 17, &mut r);
    assert!(params.forward(&long, None).is_err());
}
