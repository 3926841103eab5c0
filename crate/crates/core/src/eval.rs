//! Evaluation metrics: Hit@1 over distractor candidates, perplexity,
//! corpus BLEU-4, token F1 and the next-emotion confusion matrix.

use std::collections::HashMap;
use std::hash::Hash;

use empt_tensor::Real;
use serde::{Deserialize, Serialize, Serializer};

use crate::corpus::{self, Conversation, SampleOptions, Source, TrainingSample, Utterance};
use crate::decoder::{self, ReplyConditioning, SamplingParams};
use crate::error::{Error, Result};
use crate::input::{build_input, sample_history};
use crate::labels::{Emotion, Topic};
use crate::model::Params;
use crate::rng::{self, Purpose};
use crate::tokenizer::Vocab;

/// One evaluation position: the gold next utterance and its distractors.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalPosition {
    pub gold: TrainingSample,
    pub distractors: Vec<Utterance>,
}

impl EvalPosition {
    pub fn topic(&self) -> Topic {
        self.gold.topic
    }

    /// Candidate `i`, where 0 is the gold utterance.
    pub fn candidate(&self, i: usize) -> TrainingSample {
        if i == 0 {
            return self.gold.clone();
        }
        let cand = self.distractors[i - 1].clone();
        TrainingSample {
            candidate_emotion: cand.emotion,
            candidate: cand,
            is_gold_utterance: false,
            is_gold_emotion: false,
            source: Source::UtteranceDistractor,
            ..self.gold.clone()
        }
    }

    pub fn n_candidates(&self) -> usize {
        1 + self.distractors.len()
    }
}

/// Positions with `n_distractors` utterances from other conversations,
/// drawn from the evaluation stream of `seed`.
pub fn eval_positions(
    corpus: &[Conversation],
    history_window: usize,
    n_distractors: usize,
    seed: u64,
) -> Result<Vec<EvalPosition>> {
    let opts = SampleOptions {
        history_window,
        n_utt_distractors: n_distractors,
        n_emo_distractors: 0,
    };
    let mut rng = rng::stream(seed, Purpose::EvalDistractors, 0);
    let samples = corpus::build_samples_with(corpus, &opts, &mut rng)?;
    Ok(corpus::groups(&samples)
        .into_iter()
        .map(|r| {
            let g = &samples[r];
            EvalPosition {
                gold: g[0].clone(),
                distractors: g[1..].iter().map(|s| s.candidate.clone()).collect(),
            }
        })
        .collect())
}

/// Scores every candidate of a position; index 0 is the gold one.
pub trait Scorer {
    fn scores(&mut self, position: &EvalPosition) -> Result<Vec<f64>>;
}

/// Ranks candidates by the next-utterance margin `z1 - z0`. That order is
/// the order of P(a=1) under the binary head and of the softmax under the
/// multiple-choice head, without saturation ties.
pub struct ModelScorer<'m, T: Real> {
    pub model: &'m Params<T>,
    pub vocab: &'m Vocab,
}

impl<T: Real> Scorer for ModelScorer<'_, T> {
    fn scores(&mut self, position: &EvalPosition) -> Result<Vec<f64>> {
        let opts = self.model.config().input_options();
        (0..position.n_candidates())
            .map(|i| {
                let input = build_input(&position.candidate(i), self.vocab, &opts)?;
                self.model.utterance_margin(&input)
            })
            .collect()
    }
}

/// True when the gold score strictly exceeds every other score.
pub fn gold_wins(scores: &[f64]) -> bool {
    scores.len() > 1 && scores[1..].iter().all(|&s| scores[0] > s)
}

pub fn hit_at_1(scorer: &mut impl Scorer, positions: &[EvalPosition]) -> Result<f64> {
    if positions.is_empty() {
        return Err(Error::Invalid("no evaluation positions".into()));
    }
    let mut hits = 0usize;
    for p in positions {
        if gold_wins(&scorer.scores(p)?) {
            hits += 1;
        }
    }
    Ok(hits as f64 / positions.len() as f64)
}

/// exp of the mean per-token negative log-likelihood; infinite when a gold
/// token has probability zero.
pub fn perplexity_from(nll_sum: f64, n_tokens: usize) -> f64 {
    (nll_sum / n_tokens as f64).exp()
}

/// Token-weighted perplexity of the gold candidates (text and eos).
pub fn perplexity<T: Real>(model: &Params<T>, vocab: &Vocab, positions: &[EvalPosition]) -> Result<(f64, usize)> {
    let opts = model.config().input_options();
    let (mut sum, mut n) = (0.0, 0usize);
    for p in positions {
        let input = build_input(&p.gold, vocab, &opts)?;
        let (mean, count) = model.candidate_nll(&input)?;
        sum += mean * count as f64;
        n += count;
    }
    if n == 0 {
        return Err(Error::Invalid("no gold tokens to score".into()));
    }
    Ok((perplexity_from(sum, n), n))
}

fn ngram_counts<S: Eq + Hash>(tokens: &[S], n: usize) -> HashMap<&[S], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Corpus-level BLEU-4 with one reference per hypothesis. With `smooth`,
/// an order n ≥ 2 with no clipped match uses (0 + 1) / (total + 1).
pub fn bleu<S: Eq + Hash>(hyps: &[Vec<S>], refs: &[Vec<S>], smooth: bool) -> Result<f64> {
    if hyps.is_empty() {
        return Err(Error::Invalid("BLEU needs at least one pair".into()));
    }
    if hyps.len() != refs.len() {
        return Err(Error::Invalid(format!("{} hypotheses for {} references", hyps.len(), refs.len())));
    }
    let mut matched = [0usize; 4];
    let mut total = [0usize; 4];
    let (mut c, mut r) = (0usize, 0usize);
    for (h, rf) in hyps.iter().zip(refs) {
        c += h.len();
        r += rf.len();
        for n in 1..=4 {
            let hc = ngram_counts(h, n);
            let rc = ngram_counts(rf, n);
            total[n - 1] += h.len().saturating_sub(n - 1);
            matched[n - 1] += hc.iter().map(|(g, &k)| k.min(rc.get(g).copied().unwrap_or(0))).sum::<usize>();
        }
    }
    if c == 0 {
        return Ok(0.0);
    }
    let mut log_p = 0.0;
    for n in 0..4 {
        let p = if matched[n] == 0 && smooth && n > 0 {
            1.0 / (total[n] as f64 + 1.0)
        } else if matched[n] == 0 {
            return Ok(0.0);
        } else {
            matched[n] as f64 / total[n] as f64
        };
        log_p += 0.25 * p.ln();
    }
    let bp = if c > r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    Ok(bp * log_p.exp())
}

/// Multiset overlap F1 of one pair.
pub fn token_f1<S: Eq + Hash>(hyp: &[S], reference: &[S]) -> f64 {
    match (hyp.is_empty(), reference.is_empty()) {
        (true, true) => return 1.0,
        (true, false) | (false, true) => return 0.0,
        _ => {}
    }
    let mut counts: HashMap<&S, isize> = HashMap::new();
    for t in reference {
        *counts.entry(t).or_insert(0) += 1;
    }
    let mut overlap = 0usize;
    for t in hyp {
        if let Some(k) = counts.get_mut(t) {
            if *k > 0 {
                *k -= 1;
                overlap += 1;
            }
        }
    }
    if overlap == 0 {
        return 0.0;
    }
    let p = overlap as f64 / hyp.len() as f64;
    let r = overlap as f64 / reference.len() as f64;
    2.0 * p * r / (p + r)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Averaging {
    #[default]
    Macro,
    Micro,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Confusion {
    pub labels: Vec<Emotion>,
    /// `matrix[gold][predicted]`.
    pub matrix: Vec<Vec<usize>>,
    pub averaging: Averaging,
    /// Percentages, as the aggregate emotion scores are usually quoted.
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Classes with no gold positions, left out of the macro recall.
    pub absent: Vec<Emotion>,
}

impl Confusion {
    pub fn labels(exclude_no_emotion: bool) -> Vec<Emotion> {
        Emotion::ALL
            .iter()
            .copied()
            .filter(|&e| !(exclude_no_emotion && e == Emotion::NoEmotion))
            .collect()
    }

    /// Builds the matrix from (gold, predicted) pairs over `labels`.
    pub fn from_pairs(labels: Vec<Emotion>, pairs: &[(Emotion, Emotion)], averaging: Averaging) -> Result<Self> {
        let k = labels.len();
        let at = |e: Emotion| labels.iter().position(|&l| l == e);
        let mut matrix = vec![vec![0usize; k]; k];
        for &(g, p) in pairs {
            let (Some(gi), Some(pi)) = (at(g), at(p)) else {
                return Err(Error::Invalid(format!("label pair ({g}, {p}) outside the matrix")));
            };
            matrix[gi][pi] += 1;
        }
        let row = |i: usize| matrix[i].iter().sum::<usize>();
        let col = |j: usize| matrix.iter().map(|r| r[j]).sum::<usize>();
        let absent: Vec<Emotion> = (0..k).filter(|&i| row(i) == 0).map(|i| labels[i]).collect();
        for e in &absent {
            log::info!("emotion `{e}` has no gold positions; left out of the macro average");
        }
        let (precision, recall) = match averaging {
            Averaging::Micro => {
                let total: usize = (0..k).map(row).sum();
                let diag: usize = (0..k).map(|i| matrix[i][i]).sum();
                let acc = if total == 0 { 0.0 } else { diag as f64 / total as f64 };
                (acc, acc)
            }
            Averaging::Macro => {
                let present: Vec<usize> = (0..k).filter(|&i| row(i) > 0).collect();
                if present.is_empty() {
                    (0.0, 0.0)
                } else {
                    let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
                    let p: f64 = present.iter().map(|&i| ratio(matrix[i][i], col(i))).sum();
                    let r: f64 = present.iter().map(|&i| ratio(matrix[i][i], row(i))).sum();
                    (p / present.len() as f64, r / present.len() as f64)
                }
            }
        };
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Ok(Self {
            labels,
            matrix,
            averaging,
            precision: 100.0 * precision,
            recall: 100.0 * recall,
            f1: 100.0 * f1,
            absent,
        })
    }

    /// Per-class recall in percent, `None` for absent classes.
    pub fn class_recall(&self, e: Emotion) -> Option<f64> {
        let i = self.labels.iter().position(|&l| l == e)?;
        let row: usize = self.matrix[i].iter().sum();
        (row > 0).then(|| 100.0 * self.matrix[i][i] as f64 / row as f64)
    }
}

/// Predicted next emotion of each position, conditioned on the gold act.
/// With `exclude_no_emotion`, gold no-emotion positions are skipped and
/// the prediction is the best of the remaining six.
pub fn emotion_confusion<T: Real>(
    model: &Params<T>,
    vocab: &Vocab,
    positions: &[EvalPosition],
    exclude_no_emotion: bool,
    averaging: Averaging,
) -> Result<Confusion> {
    let labels = Confusion::labels(exclude_no_emotion);
    let mut pairs = Vec::with_capacity(positions.len());
    for p in positions {
        let gold = p.gold.candidate_emotion;
        if !labels.contains(&gold) {
            continue;
        }
        let history = sample_history(&p.gold);
        let ranked = model.predict_emotion(vocab, p.topic(), &history, Some(p.gold.candidate.act))?;
        let pred = ranked
            .iter()
            .map(|s| s.emotion)
            .find(|e| labels.contains(e))
            .expect("at least one label");
        pairs.push((gold, pred));
    }
    Confusion::from_pairs(labels, &pairs, averaging)
}

fn finite_or_inf<S: Serializer>(x: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if x.is_finite() {
        s.serialize_f64(*x)
    } else {
        s.serialize_str("inf")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub n_positions: usize,
    pub n_distractors: usize,
    pub hit_at_1: f64,
    #[serde(serialize_with = "finite_or_inf")]
    pub ppl: f64,
    pub ppl_tokens: usize,
    /// Over whitespace words of the decoded replies.
    pub bleu: f64,
    /// Over the BPE tokens of the replies.
    pub token_f1: f64,
    pub emotion_confusion: Confusion,
    pub emotion_precision: f64,
    pub emotion_recall: f64,
    pub emotion_f1: f64,
    pub seed: u64,
    pub config_hash: String,
}

#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub exclude_no_emotion: bool,
    pub averaging: Averaging,
    pub sampling: SamplingParams,
    pub seed: u64,
    pub config_hash: String,
}

/// Runs every metric. Replies for BLEU and F1 are sampled conditioned on
/// the gold emotion and act of each position, position `i` using sampling
/// stream `i`.
pub fn evaluate<T: Real>(
    model: &Params<T>,
    vocab: &Vocab,
    positions: &[EvalPosition],
    opts: &EvalOptions,
) -> Result<EvalReport> {
    if positions.is_empty() {
        return Err(Error::Invalid("no evaluation positions".into()));
    }
    let hit = hit_at_1(&mut ModelScorer { model, vocab }, positions)?;
    let (ppl, ppl_tokens) = perplexity(model, vocab, positions)?;
    let mut hyp_words = Vec::new();
    let mut ref_words = Vec::new();
    let mut f1_sum = 0.0;
    for (i, p) in positions.iter().enumerate() {
        let history = sample_history(&p.gold);
        let cond = ReplyConditioning {
            topic: p.topic(),
            emotion: Some(p.gold.candidate_emotion),
            act: Some(p.gold.candidate.act),
        };
        let reply = decoder::generate(model, vocab, &history, cond, &opts.sampling, i as u64)?;
        let reference = &p.gold.candidate.text;
        f1_sum += token_f1(&reply.token_ids, &vocab.encode(reference));
        hyp_words.push(words(&reply.text));
        ref_words.push(words(reference));
    }
    let bleu = bleu(&hyp_words, &ref_words, true)?;
    let confusion = emotion_confusion(model, vocab, positions, opts.exclude_no_emotion, opts.averaging)?;
    Ok(EvalReport {
        n_positions: positions.len(),
        n_distractors: positions[0].distractors.len(),
        hit_at_1: hit,
        ppl,
        ppl_tokens,
        bleu,
        token_f1: f1_sum / positions.len() as f64,
        emotion_precision: confusion.precision,
        emotion_recall: confusion.recall,
        emotion_f1: confusion.f1,
        emotion_confusion: confusion,
        seed: opts.seed,
        config_hash: opts.config_hash.clone(),
    })
}

pub fn words(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}
