//! Dialog corpora: DailyDialog four-file and JSON-lines ingestion, sliding
//! window sample construction with distractors, a synthetic corpus
//! generator, and the binary sample cache.

use std::collections::HashSet;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::{Act, Emotion, Topic};
use crate::rng::{self, Purpose, StreamRng};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Utterance {
    pub text: String,
    pub emotion: Emotion,
    pub act: Act,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Conversation {
    pub topic: Topic,
    pub utterances: Vec<Utterance>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Source {
    Gold,
    UtteranceDistractor,
    EmotionDistractor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSample {
    /// Samples sharing a group index share the conversation position.
    pub group: usize,
    pub conversation: usize,
    /// Index of the gold next utterance within its conversation.
    pub turn_index: usize,
    pub topic: Topic,
    pub history: Vec<Utterance>,
    pub candidate: Utterance,
    pub candidate_emotion: Emotion,
    pub is_gold_utterance: bool,
    pub is_gold_emotion: bool,
    pub source: Source,
}

impl TrainingSample {
    pub fn is_gold(&self) -> bool {
        self.is_gold_utterance && self.is_gold_emotion
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleOptions {
    pub history_window: usize,
    pub n_utt_distractors: usize,
    pub n_emo_distractors: usize,
}

impl Default for SampleOptions {
    fn default() -> Self {
        Self {
            history_window: 2,
            n_utt_distractors: 1,
            n_emo_distractors: 1,
        }
    }
}

fn data_err(file: &Path, line: usize, detail: impl Into<String>) -> Error {
    Error::Data {
        file: file.display().to_string(),
        line,
        detail: detail.into(),
    }
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = Vec::new();
    for line in BufReader::new(file).lines() {
        lines.push(line.map_err(|e| Error::io(path, e))?);
    }
    while lines.last().is_some_and(|l| l.trim().is_empty()) {
        lines.pop();
    }
    Ok(lines)
}

fn parse_digits(path: &Path, line_no: usize, line: &str) -> Result<Vec<u32>> {
    line.split_whitespace()
        .map(|tok| tok.parse::<u32>().map_err(|_| data_err(path, line_no, format!("`{tok}` is not a label digit"))))
        .collect()
}

/// Paths of the DailyDialog files for the full corpus or one split.
#[derive(Debug, Clone)]
pub struct DailyDialogFiles {
    pub dialogues: PathBuf,
    pub emotions: PathBuf,
    pub acts: PathBuf,
    pub topics: PathBuf,
    /// When set, `topics` is parallel to this dialogue file instead of
    /// `dialogues`, and topics are looked up by exact dialogue line. The
    /// split directories ship without topic files.
    pub topic_texts: Option<PathBuf>,
}

impl DailyDialogFiles {
    pub fn in_dir(dir: impl AsRef<Path>) -> Self {
        let dir = dir.as_ref();
        Self {
            dialogues: dir.join("dialogues_text.txt"),
            emotions: dir.join("dialogues_emotion.txt"),
            acts: dir.join("dialogues_act.txt"),
            topics: dir.join("dialogues_topic.txt"),
            topic_texts: None,
        }
    }

    /// `root/<split>/dialogues_<split>.txt` and friends, with topics taken
    /// from the full-corpus files in `root`.
    pub fn split(root: impl AsRef<Path>, split: &str) -> Self {
        let root = root.as_ref();
        let dir = root.join(split);
        Self {
            dialogues: dir.join(format!("dialogues_{split}.txt")),
            emotions: dir.join(format!("dialogues_emotion_{split}.txt")),
            acts: dir.join(format!("dialogues_act_{split}.txt")),
            topics: root.join("dialogues_topic.txt"),
            topic_texts: Some(root.join("dialogues_text.txt")),
        }
    }
}

fn topic_lines(files: &DailyDialogFiles, texts: &[String]) -> Result<Vec<(usize, String)>> {
    let topics = read_lines(&files.topics)?;
    let Some(full) = &files.topic_texts else {
        if topics.len() != texts.len() {
            return Err(data_err(
                &files.topics,
                topics.len().min(texts.len()) + 1,
                format!("{} lines but the dialogue file has {}", topics.len(), texts.len()),
            ));
        }
        return Ok(topics.into_iter().enumerate().map(|(i, t)| (i + 1, t)).collect());
    };
    let full_texts = read_lines(full)?;
    if full_texts.len() != topics.len() {
        return Err(data_err(
            &files.topics,
            topics.len().min(full_texts.len()) + 1,
            format!("{} lines but {} has {}", topics.len(), full.display(), full_texts.len()),
        ));
    }
    let by_text: std::collections::HashMap<&str, usize> =
        full_texts.iter().enumerate().map(|(i, t)| (t.trim(), i)).collect();
    texts
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let j = by_text
                .get(t.trim())
                .ok_or_else(|| data_err(&files.dialogues, i + 1, format!("dialogue not found in {}", full.display())))?;
            Ok((j + 1, topics[*j].clone()))
        })
        .collect()
}

/// Loads the four parallel DailyDialog files. Conversations with fewer
/// than two utterances are skipped with a warning.
pub fn load_dailydialog(files: &DailyDialogFiles) -> Result<Vec<Conversation>> {
    let texts = read_lines(&files.dialogues)?;
    let emotions = read_lines(&files.emotions)?;
    let acts = read_lines(&files.acts)?;
    let topics = topic_lines(files, &texts)?;
    if texts.is_empty() && emotions.is_empty() && acts.is_empty() {
        log::warn!("DailyDialog files under {} are empty", files.dialogues.display());
        return Ok(Vec::new());
    }
    for (path, lines) in [(&files.emotions, &emotions), (&files.acts, &acts)] {
        if lines.len() != texts.len() {
            let line = lines.len().min(texts.len()) + 1;
            return Err(data_err(
                path,
                line,
                format!("{} lines but the dialogue file has {}", lines.len(), texts.len()),
            ));
        }
    }

    let mut out = Vec::with_capacity(texts.len());
    for i in 0..texts.len() {
        let line_no = i + 1;
        let mut utts: Vec<&str> = texts[i].split("__eou__").map(str::trim).collect();
        if utts.last() == Some(&"") {
            utts.pop();
        }
        let emo = parse_digits(&files.emotions, line_no, &emotions[i])?;
        let act = parse_digits(&files.acts, line_no, &acts[i])?;
        let (topic_line, topic_text) = &topics[i];
        let topic_line = *topic_line;
        let topic = parse_digits(&files.topics, topic_line, topic_text)?;
        if emo.len() != utts.len() {
            return Err(data_err(
                &files.emotions,
                line_no,
                format!("{} emotion labels for {} utterances", emo.len(), utts.len()),
            ));
        }
        if act.len() != utts.len() {
            return Err(data_err(
                &files.acts,
                line_no,
                format!("{} act labels for {} utterances", act.len(), utts.len()),
            ));
        }
        let topic = match topic.as_slice() {
            [d] => Topic::from_digit(*d).ok_or_else(|| data_err(&files.topics, topic_line, format!("unknown topic {d}")))?,
            _ => return Err(data_err(&files.topics, topic_line, "expected exactly one topic digit")),
        };
        let mut utterances = Vec::with_capacity(utts.len());
        for (j, text) in utts.iter().enumerate() {
            if text.is_empty() {
                return Err(data_err(&files.dialogues, line_no, format!("utterance {} is empty", j + 1)));
            }
            let emotion = Emotion::from_digit(emo[j])
                .ok_or_else(|| data_err(&files.emotions, line_no, format!("unknown emotion {}", emo[j])))?;
            let act = Act::from_digit(act[j])
                .ok_or_else(|| data_err(&files.acts, line_no, format!("unknown act {}", act[j])))?;
            utterances.push(Utterance {
                text: text.to_string(),
                emotion,
                act,
            });
        }
        if utterances.len() < 2 {
            log::warn!("skipping single-utterance conversation at line {line_no}");
            continue;
        }
        out.push(Conversation { topic, utterances });
    }
    Ok(out)
}

/// Loads `{topic, utterances: [{text, emotion, act}]}` per line.
pub fn load_jsonl(path: impl AsRef<Path>) -> Result<Vec<Conversation>> {
    let path = path.as_ref();
    let mut out = Vec::new();
    for (i, line) in read_lines(path)?.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let conv: Conversation = serde_json::from_str(line).map_err(|e| data_err(path, i + 1, e.to_string()))?;
        if let Some(j) = conv.utterances.iter().position(|u| u.text.trim().is_empty()) {
            return Err(data_err(path, i + 1, format!("utterance {} is empty", j + 1)));
        }
        if conv.utterances.len() < 2 {
            log::warn!("skipping single-utterance conversation at line {}", i + 1);
            continue;
        }
        out.push(conv);
    }
    Ok(out)
}

pub fn save_jsonl(path: impl AsRef<Path>, corpus: &[Conversation]) -> Result<()> {
    let path = path.as_ref();
    let mut text = String::new();
    for c in corpus {
        text.push_str(&serde_json::to_string(c)?);
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Loads `path` as JSON lines if it is a file, otherwise as a DailyDialog
/// directory.
pub fn load_corpus(path: impl AsRef<Path>) -> Result<Vec<Conversation>> {
    let path = path.as_ref();
    if path.is_file() {
        load_jsonl(path)
    } else {
        load_dailydialog(&DailyDialogFiles::in_dir(path))
    }
}

/// Builds the samples with the training distractor stream of `seed`.
pub fn build_samples(corpus: &[Conversation], opts: &SampleOptions, seed: u64) -> Result<Vec<TrainingSample>> {
    build_samples_with(corpus, opts, &mut rng::stream(seed, Purpose::Distractors, 0))
}

/// One gold sample per position `t >= history_window`, followed by its
/// utterance and emotion distractors. Utterance distractors are drawn
/// uniformly over the utterances of other conversations, distinct in text
/// from the gold reply and from each other.
pub fn build_samples_with(
    corpus: &[Conversation],
    opts: &SampleOptions,
    rng: &mut StreamRng,
) -> Result<Vec<TrainingSample>> {
    if opts.history_window == 0 {
        return Err(Error::config("history_window", "must be at least 1"));
    }
    if opts.n_emo_distractors >= Emotion::COUNT {
        return Err(Error::config(
            "n_emo_distractors",
            format!("at most {} other emotions exist", Emotion::COUNT - 1),
        ));
    }
    let pool: Vec<(usize, usize)> = corpus
        .iter()
        .enumerate()
        .flat_map(|(c, conv)| (0..conv.utterances.len()).map(move |u| (c, u)))
        .collect();
    if opts.n_utt_distractors > 0 {
        if corpus.len() < 2 {
            return Err(Error::Invalid(
                "utterance distractors need at least two conversations".into(),
            ));
        }
        let min_other = corpus
            .iter()
            .map(|c| pool.len() - c.utterances.len())
            .min()
            .unwrap_or(0);
        if min_other < opts.n_utt_distractors {
            return Err(Error::Invalid(format!(
                "{} utterance distractors requested but some conversation has only {min_other} foreign utterances",
                opts.n_utt_distractors
            )));
        }
    }

    let mut out = Vec::new();
    let mut group = 0;
    for (ci, conv) in corpus.iter().enumerate() {
        if conv.utterances.len() < 2 {
            log::warn!("conversation {ci} has fewer than two utterances; skipped");
            continue;
        }
        for t in opts.history_window..conv.utterances.len() {
            let gold = &conv.utterances[t];
            let base = TrainingSample {
                group,
                conversation: ci,
                turn_index: t,
                topic: conv.topic,
                history: conv.utterances[t - opts.history_window..t].to_vec(),
                candidate: gold.clone(),
                candidate_emotion: gold.emotion,
                is_gold_utterance: true,
                is_gold_emotion: true,
                source: Source::Gold,
            };

            let mut seen: HashSet<&str> = HashSet::from([gold.text.as_str()]);
            let mut distractors = Vec::with_capacity(opts.n_utt_distractors);
            let mut attempts = 0usize;
            while distractors.len() < opts.n_utt_distractors {
                attempts += 1;
                if attempts > 1000 * (opts.n_utt_distractors + 1) {
                    return Err(Error::Invalid(format!(
                        "could not find {} distinct distractors for conversation {ci}",
                        opts.n_utt_distractors
                    )));
                }
                let &(dc, du) = pool.choose(rng).expect("pool is non-empty");
                let cand = &corpus[dc].utterances[du];
                if dc == ci || !seen.insert(cand.text.as_str()) {
                    continue;
                }
                distractors.push(cand.clone());
            }

            let mut others: Vec<Emotion> = Emotion::ALL.iter().copied().filter(|&e| e != gold.emotion).collect();
            others.shuffle(rng);

            let emo_distractors = others[..opts.n_emo_distractors].iter().map(|&e| TrainingSample {
                candidate_emotion: e,
                is_gold_emotion: false,
                source: Source::EmotionDistractor,
                ..base.clone()
            });
            let utt_distractors: Vec<_> = distractors
                .into_iter()
                .map(|cand| TrainingSample {
                    candidate_emotion: cand.emotion,
                    candidate: cand,
                    is_gold_utterance: false,
                    is_gold_emotion: false,
                    source: Source::UtteranceDistractor,
                    ..base.clone()
                })
                .collect();
            out.push(base.clone());
            out.extend(utt_distractors);
            out.extend(emo_distractors);
            group += 1;
        }
    }
    Ok(out)
}

/// Contiguous index ranges of samples sharing a group.
pub fn groups(samples: &[TrainingSample]) -> Vec<std::ops::Range<usize>> {
    let mut out = Vec::new();
    let mut start = 0;
    for i in 1..=samples.len() {
        if i == samples.len() || samples[i].group != samples[start].group {
            if i > start {
                out.push(start..i);
            }
            start = i;
        }
    }
    out
}

const OPENERS: [&str; 7] = [
    "here is the plan for",
    "i hate the noise about",
    "that smell near",
    "i am scared of",
    "great news about",
    "i miss the old",
    "wow look at",
];

const REPLIES: [&str; 7] = [
    "fine , tell me about",
    "calm down about",
    "yuck , keep away from",
    "do not worry about",
    "congratulations on",
    "i am so sorry about",
    "really ? no way ,",
];

const NOUNS: [&str; 10] = [
    "the kitchen", "the exam", "the museum", "my feelings", "our date", "the beach", "the doctor", "the meeting",
    "the vote", "the bank",
];

const EXTRAS: [&str; 12] = [
    "today", "tomorrow", "again", "at noon", "this week", "right now", "later", "tonight", "soon", "here", "there",
    "now",
];

/// Deterministic toy corpus. Replies mirror the previous speaker's emotion
/// with a fixed phrase bank and later openers shift it by a topic-dependent
/// step, so every next emotion is a function of the context.
pub fn synthetic_corpus(n: usize, seed: u64) -> Vec<Conversation> {
    let mut rng = rng::stream(seed, Purpose::Synthetic, 0);
    (0..n)
        .map(|_| {
            let topic = *Topic::ALL.choose(&mut rng).unwrap();
            let noun = NOUNS[topic.index()];
            let len = rng.random_range(4..=5);
            let mut utterances = Vec::with_capacity(len);
            let mut emotion = *Emotion::ALL.choose(&mut rng).unwrap();
            for i in 0..len {
                let extra = EXTRAS.choose(&mut rng).unwrap();
                let (text, act) = if i % 2 == 0 {
                    if i > 0 {
                        emotion = Emotion::from_index((emotion.index() + topic.index() + 1) % Emotion::COUNT)
                            .expect("index in range");
                    }
                    (format!("{} {noun} {extra} .", OPENERS[emotion.index()]), Act::Inform)
                } else {
                    let act = if emotion == Emotion::Surprise { Act::Question } else { Act::Commissive };
                    (format!("{} {noun} {extra} !", REPLIES[emotion.index()]), act)
                };
                utterances.push(Utterance { text, emotion, act });
            }
            Conversation { topic, utterances }
        })
        .collect()
}

pub const CACHE_FORMAT: &str = "empt-samples";
pub const CACHE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheManifest {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    pub options: SampleOptions,
    pub n_conversations: usize,
    pub n_groups: usize,
    pub n_samples: usize,
    pub n_gold: usize,
    pub n_utterance_distractors: usize,
    pub n_emotion_distractors: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleCache {
    pub manifest: CacheManifest,
    pub conversations: Vec<Conversation>,
    pub samples: Vec<TrainingSample>,
}

#[derive(Serialize, Deserialize)]
struct CachePayload {
    conversations: Vec<Conversation>,
    samples: Vec<TrainingSample>,
}

impl SampleCache {
    pub fn build(conversations: Vec<Conversation>, options: SampleOptions, seed: u64) -> Result<Self> {
        let samples = build_samples(&conversations, &options, seed)?;
        let count = |s: Source| samples.iter().filter(|x| x.source == s).count();
        let manifest = CacheManifest {
            format: CACHE_FORMAT.into(),
            version: CACHE_VERSION,
            seed,
            options,
            n_conversations: conversations.len(),
            n_groups: groups(&samples).len(),
            n_samples: samples.len(),
            n_gold: count(Source::Gold),
            n_utterance_distractors: count(Source::UtteranceDistractor),
            n_emotion_distractors: count(Source::EmotionDistractor),
        };
        Ok(Self {
            manifest,
            conversations,
            samples,
        })
    }

    /// Layout: u64 little-endian manifest length, JSON manifest, CBOR payload.
    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let manifest = serde_json::to_vec(&self.manifest)?;
        let ioe = |e| Error::io("<sample cache>", e);
        w.write_all(&(manifest.len() as u64).to_le_bytes()).map_err(ioe)?;
        w.write_all(&manifest).map_err(ioe)?;
        let payload = CachePayload {
            conversations: self.conversations.clone(),
            samples: self.samples.clone(),
        };
        ciborium::into_writer(&payload, &mut w).map_err(|e| Error::Serde(e.to_string()))?;
        w.flush().map_err(ioe)
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let ioe = |e| Error::io("<sample cache>", e);
        let mut len = [0u8; 8];
        r.read_exact(&mut len).map_err(ioe)?;
        let len = u64::from_le_bytes(len);
        if len > 1 << 24 {
            return Err(Error::Serde(format!("implausible manifest length {len}")));
        }
        let mut manifest = vec![0u8; len as usize];
        r.read_exact(&mut manifest).map_err(ioe)?;
        let manifest: CacheManifest = serde_json::from_slice(&manifest)?;
        if manifest.format != CACHE_FORMAT || manifest.version != CACHE_VERSION {
            return Err(Error::Serde(format!(
                "not a sample cache (format {} v{})",
                manifest.format, manifest.version
            )));
        }
        let payload: CachePayload = ciborium::from_reader(r).map_err(|e| Error::Serde(e.to_string()))?;
        if payload.samples.len() != manifest.n_samples || payload.conversations.len() != manifest.n_conversations {
            return Err(Error::Serde("sample cache payload disagrees with its manifest".into()));
        }
        Ok(Self {
            manifest,
            conversations: payload.conversations,
            samples: payload.samples,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_to(std::io::BufWriter::new(file))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(BufReader::new(file))
    }
}
