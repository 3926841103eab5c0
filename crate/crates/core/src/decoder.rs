//! Temperature scaling, nucleus filtering and autoregressive reply generation.

use empt_tensor::{Real, Tape};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::input::{self, CandidateSpec, Turn};
use crate::labels::{Act, Emotion, Topic};
use crate::model::Params;
use crate::rng::{self, Purpose};
use crate::tokenizer::{Special, Vocab};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplingParams {
    pub p: f64,
    pub temperature: f64,
    pub max_new_tokens: usize,
    pub seed: u64,
}

impl Default for SamplingParams {
    fn default() -> Self {
        Self {
            p: 0.9,
            temperature: 0.7,
            max_new_tokens: 40,
            seed: 0,
        }
    }
}

impl SamplingParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.p > 0.0 && self.p <= 1.0) {
            return Err(Error::config("sampling.p", "must lie in (0, 1]"));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::config("sampling.temperature", "must be positive"));
        }
        if self.max_new_tokens == 0 {
            return Err(Error::config("sampling.max_new_tokens", "must be at least 1"));
        }
        Ok(())
    }
}

/// softmax(logits / t). Entries equal to -inf get probability 0.
pub fn apply_temperature(logits: &[f64], t: f64) -> Result<Vec<f64>> {
    if !(t > 0.0) {
        return Err(Error::config("sampling.temperature", "must be positive"));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&z| ((z - max) / t).exp()).collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|x| *x /= sum);
    Ok(out)
}

/// The smallest set of most probable tokens whose mass reaches `p`,
/// renormalised. Ordered by probability descending, then id ascending.
pub fn nucleus_filter(probs: &[f64], p: f64) -> Result<Vec<(usize, f64)>> {
    if !(p > 0.0) {
        return Err(Error::config("sampling.p", "must be positive"));
    }
    let mut order: Vec<usize> = (0..probs.len()).filter(|&i| probs[i] > 0.0).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    let mut cum = 0.0;
    let mut keep = order.len();
    for (k, &i) in order.iter().enumerate() {
        cum += probs[i];
        if cum >= p {
            keep = k + 1;
            break;
        }
    }
    order.truncate(keep);
    let mass: f64 = order.iter().map(|&i| probs[i]).sum();
    Ok(order.into_iter().map(|i| (i, probs[i] / mass)).collect())
}

/// Inverse-CDF draw: the first entry whose cumulative mass exceeds `u`.
pub fn sample_index(dist: &[(usize, f64)], u: f64) -> usize {
    let mut cum = 0.0;
    for &(i, q) in dist {
        cum += q;
        if u < cum {
            return i;
        }
    }
    dist.last().expect("non-empty distribution").0
}

pub fn draw(logits: &[f64], params: &SamplingParams, rng: &mut impl Rng) -> Result<usize> {
    let probs = apply_temperature(logits, params.temperature)?;
    let dist = nucleus_filter(&probs, params.p)?;
    Ok(sample_index(&dist, rng.random::<f64>()))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Generated {
    pub token_ids: Vec<u32>,
    pub text: String,
    /// False when `max_new_tokens` ran out before eos.
    pub finished: bool,
}

/// What the reply is conditioned on.
#[derive(Debug, Clone, Copy)]
pub struct ReplyConditioning {
    pub topic: Topic,
    pub emotion: Option<Emotion>,
    pub act: Option<Act>,
}

/// Samples a reply token by token. Special tokens other than eos are never
/// emitted. `stream_index` selects the sampling stream of `params.seed`.
pub fn generate<T: Real>(
    model: &Params<T>,
    vocab: &Vocab,
    history: &[Turn],
    cond: ReplyConditioning,
    params: &SamplingParams,
    stream_index: u64,
) -> Result<Generated> {
    params.validate()?;
    let opts = model.config().input_options();
    let spec = CandidateSpec {
        speaker: input::next_speaker(history),
        text: None,
        emotion: cond.emotion,
        act: cond.act,
    };
    let mut seq = input::assemble(vocab, cond.topic, history, spec, params.max_new_tokens + 1, &opts)?;
    // Drop the cls; the prefix ends at the candidate speaker token.
    seq.token_ids.pop();
    seq.position_ids.pop();
    seq.emotion_ids.pop();
    seq.action_ids.pop();
    let (emo_row, act_row) = (seq.emotion_ids[seq.candidate_start], seq.action_ids[seq.candidate_start]);
    let eos = vocab.special(Special::Eos) as usize;
    let mut rng = rng::stream(params.seed, Purpose::Sampling, stream_index);
    let mut out = Vec::new();
    let mut finished = false;
    for _ in 0..params.max_new_tokens {
        let mut logits = next_token_logits(model, &seq)?;
        for (id, z) in logits.iter_mut().enumerate() {
            if id != eos && vocab.is_special(id as u32) {
                *z = f64::NEG_INFINITY;
            }
        }
        let id = draw(&logits, params, &mut rng)?;
        if id == eos {
            finished = true;
            break;
        }
        out.push(id as u32);
        seq.token_ids.push(id as u32);
        seq.position_ids.push(seq.position_ids.len() as u32);
        seq.emotion_ids.push(emo_row);
        seq.action_ids.push(act_row);
    }
    let text = vocab.decode(&out, false)?;
    Ok(Generated {
        token_ids: out,
        text,
        finished,
    })
}

/// LM logits at the last position of `seq`.
pub fn next_token_logits<T: Real>(model: &Params<T>, seq: &input::InputRepr) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let b = model.bind(&mut tape, false);
    let h = model.hidden(&mut tape, &b, seq, None)?;
    let z = model.lm_logits(&mut tape, &b, h, &[seq.len() - 1])?;
    Ok(tape.value(z).iter().map(|x| x.to_f64_lossy()).collect())
}
