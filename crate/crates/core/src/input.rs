//! Assembly of the parallel id rows fed to the model.
//!
//! Layout: `[topic][bos]` then one span per history utterance
//! (`[speaker] text...`), then the candidate span (`[speaker] text... [eos]`),
//! then `[cls]`. Metadata rows hold table indices: emotions `0..7` and acts
//! `0..4`, with the last index of each table meaning "neutral" for positions
//! outside any utterance or for unlabeled turns.

use serde::{Deserialize, Serialize};

use crate::corpus::TrainingSample;
use crate::error::{Error, Result};
use crate::labels::{Act, Emotion, Speaker, Topic};
use crate::tokenizer::{Special, Vocab};

pub const NEUTRAL_EMOTION: u32 = Emotion::COUNT as u32;
pub const NEUTRAL_ACT: u32 = Act::COUNT as u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputOptions {
    pub max_len: usize,
    pub use_topic: bool,
    pub use_emotion: bool,
    pub use_action: bool,
}

impl Default for InputOptions {
    fn default() -> Self {
        Self {
            max_len: 256,
            use_topic: true,
            use_emotion: true,
            use_action: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InputRepr {
    pub token_ids: Vec<u32>,
    pub position_ids: Vec<u32>,
    pub emotion_ids: Vec<u32>,
    pub action_ids: Vec<u32>,
    /// Position of the candidate's speaker token.
    pub candidate_start: usize,
    /// Position of the candidate's eos, absent for generation stubs.
    pub eos: Option<usize>,
}

impl InputRepr {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    /// Position of the final cls token.
    pub fn cls(&self) -> usize {
        self.len() - 1
    }

    /// `(input position, target token)` pairs for next-token prediction of
    /// the candidate text and its eos.
    pub fn lm_targets(&self) -> Vec<(usize, u32)> {
        match self.eos {
            Some(eos) => (self.candidate_start..eos).map(|p| (p, self.token_ids[p + 1])).collect(),
            None => Vec::new(),
        }
    }

    pub fn check(&self) {
        let n = self.len();
        assert!(
            self.position_ids.len() == n && self.emotion_ids.len() == n && self.action_ids.len() == n,
            "input rows differ in length"
        );
    }
}

/// One context turn; unlabeled metadata maps to the neutral index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Turn {
    pub speaker: Speaker,
    pub text: String,
    pub emotion: Option<Emotion>,
    pub act: Option<Act>,
}

/// The candidate span: its text (absent for a stub) and conditioning labels.
#[derive(Debug, Clone, Copy)]
pub struct CandidateSpec<'t> {
    pub speaker: Speaker,
    pub text: Option<&'t str>,
    pub emotion: Option<Emotion>,
    pub act: Option<Act>,
}

fn emotion_row(e: Option<Emotion>, opts: &InputOptions) -> u32 {
    match e {
        Some(e) if opts.use_emotion => e.index() as u32,
        _ => NEUTRAL_EMOTION,
    }
}

fn act_row(a: Option<Act>, opts: &InputOptions) -> u32 {
    match a {
        Some(a) if opts.use_action => a.index() as u32,
        _ => NEUTRAL_ACT,
    }
}

/// Assembles the rows. `reserve` extra positions are kept free after the
/// candidate (room for generated tokens). The oldest history tokens are
/// dropped first when over budget.
pub fn assemble(
    vocab: &Vocab,
    topic: Topic,
    history: &[Turn],
    candidate: CandidateSpec<'_>,
    reserve: usize,
    opts: &InputOptions,
) -> Result<InputRepr> {
    let cand_text = candidate.text.map(|t| vocab.encode(t));
    let cand_len = 1 + cand_text.as_ref().map_or(0, |t| t.len() + 1);
    let fixed = 3 + cand_len + reserve;
    if fixed > opts.max_len {
        return Err(Error::Overflow(format!(
            "candidate needs {fixed} positions but max_len is {}",
            opts.max_len
        )));
    }
    let budget = opts.max_len - fixed;

    let mut hist_tokens = Vec::new();
    let mut hist_emo = Vec::new();
    let mut hist_act = Vec::new();
    for turn in history {
        let ids = vocab.encode(&turn.text);
        let n = ids.len() + 1;
        hist_tokens.push(Special::Speaker(turn.speaker).id());
        hist_tokens.extend(ids);
        hist_emo.extend(std::iter::repeat_n(emotion_row(turn.emotion, opts), n));
        hist_act.extend(std::iter::repeat_n(act_row(turn.act, opts), n));
    }
    let skip = hist_tokens.len().saturating_sub(budget);

    let topic_id = if opts.use_topic { Special::Topic(topic).id() } else { Special::Neutral.id() };
    let mut token_ids = vec![topic_id, Special::Bos.id()];
    let mut emotion_ids = vec![NEUTRAL_EMOTION; 2];
    let mut action_ids = vec![NEUTRAL_ACT; 2];
    token_ids.extend_from_slice(&hist_tokens[skip..]);
    emotion_ids.extend_from_slice(&hist_emo[skip..]);
    action_ids.extend_from_slice(&hist_act[skip..]);

    let candidate_start = token_ids.len();
    let ce = emotion_row(candidate.emotion, opts);
    let ca = act_row(candidate.act, opts);
    token_ids.push(Special::Speaker(candidate.speaker).id());
    let mut eos = None;
    if let Some(text) = cand_text {
        token_ids.extend(text);
        eos = Some(token_ids.len());
        token_ids.push(Special::Eos.id());
    }
    let span = token_ids.len() - candidate_start;
    emotion_ids.extend(std::iter::repeat_n(ce, span));
    action_ids.extend(std::iter::repeat_n(ca, span));

    token_ids.push(Special::Cls.id());
    emotion_ids.push(NEUTRAL_EMOTION);
    action_ids.push(NEUTRAL_ACT);
    let position_ids = (0..token_ids.len() as u32).collect();
    let repr = InputRepr {
        token_ids,
        position_ids,
        emotion_ids,
        action_ids,
        candidate_start,
        eos,
    };
    repr.check();
    Ok(repr)
}

/// History turns of a sample, with speakers following turn parity.
pub fn sample_history(sample: &TrainingSample) -> Vec<Turn> {
    let first = sample.turn_index - sample.history.len();
    sample
        .history
        .iter()
        .enumerate()
        .map(|(i, u)| Turn {
            speaker: Speaker::of_turn(first + i),
            text: u.text.clone(),
            emotion: Some(u.emotion),
            act: Some(u.act),
        })
        .collect()
}

/// Full training input for a sample: the candidate span carries the
/// sample's candidate emotion and the candidate utterance's act.
pub fn build_input(sample: &TrainingSample, vocab: &Vocab, opts: &InputOptions) -> Result<InputRepr> {
    let history = sample_history(sample);
    let candidate = CandidateSpec {
        speaker: Speaker::of_turn(sample.turn_index),
        text: Some(&sample.candidate.text),
        emotion: Some(sample.candidate_emotion),
        act: Some(sample.candidate.act),
    };
    assemble(vocab, sample.topic, &history, candidate, 0, opts)
}

/// Speaker of the reply that follows `history`.
pub fn next_speaker(history: &[Turn]) -> Speaker {
    history.last().map_or(Speaker::First, |t| t.speaker.other())
}
