//! Byte-pair-encoding tokenizer with a fixed block of special tokens.
//!
//! Text is split on ' ' into words; inside a word, alphanumeric runs and
//! single other characters form units that merges never cross. Each word
//! ends with an end-of-word marker, which decodes to the separating space,
//! so `decode(encode(s)) == s` for any string. Characters unseen during
//! training fall back to their UTF-8 bytes.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::{Act, Emotion, Speaker, Topic};

pub const VOCAB_VERSION: u32 = 1;

/// Reserved tokens injected by the input pipeline. Ids are contiguous from 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Special {
    Pad,
    Bos,
    Eos,
    Cls,
    Speaker(Speaker),
    Emotion(Emotion),
    Act(Act),
    Topic(Topic),
    /// Filler for metadata rows at positions that belong to no utterance.
    Neutral,
}

const EMOTION_BASE: u32 = 6;
const ACT_BASE: u32 = EMOTION_BASE + Emotion::COUNT as u32;
const TOPIC_BASE: u32 = ACT_BASE + Act::COUNT as u32;
const NEUTRAL_ID: u32 = TOPIC_BASE + Topic::COUNT as u32;

impl Special {
    pub const COUNT: usize = NEUTRAL_ID as usize + 1;

    pub fn id(self) -> u32 {
        match self {
            Special::Pad => 0,
            Special::Bos => 1,
            Special::Eos => 2,
            Special::Cls => 3,
            Special::Speaker(Speaker::First) => 4,
            Special::Speaker(Speaker::Second) => 5,
            Special::Emotion(e) => EMOTION_BASE + e.index() as u32,
            Special::Act(a) => ACT_BASE + a.index() as u32,
            Special::Topic(t) => TOPIC_BASE + t.index() as u32,
            Special::Neutral => NEUTRAL_ID,
        }
    }

    pub fn from_id(id: u32) -> Option<Self> {
        Some(match id {
            0 => Special::Pad,
            1 => Special::Bos,
            2 => Special::Eos,
            3 => Special::Cls,
            4 => Special::Speaker(Speaker::First),
            5 => Special::Speaker(Speaker::Second),
            i if i < ACT_BASE => Special::Emotion(Emotion::from_index((i - EMOTION_BASE) as usize)?),
            i if i < TOPIC_BASE => Special::Act(Act::from_index((i - ACT_BASE) as usize)?),
            i if i < NEUTRAL_ID => Special::Topic(Topic::from_index((i - TOPIC_BASE) as usize)?),
            NEUTRAL_ID => Special::Neutral,
            _ => return None,
        })
    }

    pub fn all() -> impl Iterator<Item = Special> {
        (0..Self::COUNT as u32).map(|i| Special::from_id(i).unwrap())
    }

    pub fn name(self) -> String {
        match self {
            Special::Pad => "pad".into(),
            Special::Bos => "bos".into(),
            Special::Eos => "eos".into(),
            Special::Cls => "cls".into(),
            Special::Speaker(Speaker::First) => "speaker1".into(),
            Special::Speaker(Speaker::Second) => "speaker2".into(),
            Special::Emotion(e) => format!("emotion:{e}"),
            Special::Act(a) => format!("act:{a}"),
            Special::Topic(t) => format!("topic:{t}"),
            Special::Neutral => "neutral".into(),
        }
    }
}

impl fmt::Display for Special {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "<{}>", self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Token {
    Special(String),
    /// Text fragment; `eow` marks a word-final piece that renders a space.
    Piece { text: String, eow: bool },
    Byte(u8),
}

impl Token {
    fn eow_marker() -> Self {
        Token::Piece {
            text: String::new(),
            eow: true,
        }
    }

    fn piece(text: impl Into<String>) -> Self {
        Token::Piece {
            text: text.into(),
            eow: false,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    version: u32,
    specials: Vec<String>,
    tokens: Vec<Token>,
    merges: Vec<(u32, u32)>,
}

#[derive(Debug, Clone)]
pub struct Vocab {
    tokens: Vec<Token>,
    id_of: HashMap<Token, u32>,
    merges: Vec<(u32, u32)>,
    /// (left, right) -> (rank, merged id)
    merge_of: HashMap<(u32, u32), (u32, u32)>,
    eow: u32,
    first_byte: u32,
}

/// A pre-tokenized unit: a slice of one word and whether it ends the word.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Unit<'s> {
    text: &'s str,
    eow: bool,
}

fn is_space_like(c: char) -> bool {
    c.is_whitespace()
}

fn pre_tokenize(text: &str) -> Vec<Unit<'_>> {
    let mut units = Vec::new();
    if text.is_empty() {
        return units;
    }
    for word in text.split(' ') {
        let start = units.len();
        let mut chars = word.char_indices().peekable();
        while let Some((i, c)) = chars.next() {
            let mut end = i + c.len_utf8();
            if c.is_alphanumeric() {
                while let Some(&(j, d)) = chars.peek() {
                    if !d.is_alphanumeric() {
                        break;
                    }
                    end = j + d.len_utf8();
                    chars.next();
                }
            }
            units.push(Unit {
                text: &word[i..end],
                eow: false,
            });
        }
        match units[start..].last_mut() {
            Some(last) if !last.text.chars().all(is_space_like) => last.eow = true,
            _ => units.push(Unit { text: "", eow: true }),
        }
    }
    units
}

/// Counts adjacent pairs without overlap: in `a a a` the pair (a, a) counts once.
fn for_each_pair(symbols: &[u32], mut f: impl FnMut(usize, (u32, u32))) {
    let mut i = 0;
    while i + 1 < symbols.len() {
        let pair = (symbols[i], symbols[i + 1]);
        f(i, pair);
        // A run of identical symbols overlaps itself; skip the overlapped start.
        if i + 2 < symbols.len() && symbols[i + 1] == pair.0 && symbols[i + 2] == pair.1 && pair.0 == pair.1 {
            i += 2;
        } else {
            i += 1;
        }
    }
}

/// Replaces every non-overlapping occurrence of `pair`, scanning left to right.
fn apply_merge(symbols: &mut Vec<u32>, pair: (u32, u32), merged: u32) {
    let mut out = Vec::with_capacity(symbols.len());
    let mut i = 0;
    while i < symbols.len() {
        if i + 1 < symbols.len() && (symbols[i], symbols[i + 1]) == pair {
            out.push(merged);
            i += 2;
        } else {
            out.push(symbols[i]);
            i += 1;
        }
    }
    *symbols = out;
}

impl Vocab {
    fn from_parts(tokens: Vec<Token>, merges: Vec<(u32, u32)>) -> Result<Self> {
        if tokens.len() < Special::COUNT + 257 {
            return Err(Error::Vocab(format!("only {} tokens", tokens.len())));
        }
        for s in Special::all() {
            if tokens[s.id() as usize] != Token::Special(s.name()) {
                return Err(Error::Vocab(format!("special {s} missing at id {}", s.id())));
            }
        }
        let mut id_of = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if let Token::Special(_) = t {
                if i >= Special::COUNT {
                    return Err(Error::Vocab(format!("special token outside the reserved block at {i}")));
                }
            }
            if id_of.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Vocab(format!("duplicate token {t:?}")));
            }
        }
        let eow = *id_of
            .get(&Token::eow_marker())
            .ok_or_else(|| Error::Vocab("missing end-of-word marker".into()))?;
        let first_byte = *id_of
            .get(&Token::Byte(0))
            .ok_or_else(|| Error::Vocab("missing byte tokens".into()))?;
        for b in 0..=255u8 {
            if id_of.get(&Token::Byte(b)) != Some(&(first_byte + b as u32)) {
                return Err(Error::Vocab("byte tokens must be contiguous".into()));
            }
        }
        let mut vocab = Vocab {
            tokens,
            id_of,
            merges: Vec::new(),
            merge_of: HashMap::new(),
            eow,
            first_byte,
        };
        for (a, b) in merges {
            let merged = vocab
                .concat(a, b)
                .and_then(|t| vocab.id_of.get(&t).copied())
                .ok_or_else(|| Error::Vocab(format!("merge ({a}, {b}) has no result token")))?;
            vocab.push_merge(a, b, merged);
        }
        Ok(vocab)
    }

    fn push_merge(&mut self, a: u32, b: u32, merged: u32) {
        let rank = self.merges.len() as u32;
        self.merges.push((a, b));
        self.merge_of.entry((a, b)).or_insert((rank, merged));
    }

    fn concat(&self, a: u32, b: u32) -> Option<Token> {
        match (self.tokens.get(a as usize)?, self.tokens.get(b as usize)?) {
            (Token::Piece { text: x, eow: false }, Token::Piece { text: y, eow }) => Some(Token::Piece {
                text: format!("{x}{y}"),
                eow: *eow,
            }),
            _ => None,
        }
    }

    /// Smallest vocabulary that holds the specials, the end-of-word marker,
    /// all 256 bytes and every distinct character of `corpus`.
    pub fn minimum_size<'a>(corpus: impl IntoIterator<Item = &'a str>) -> usize {
        let chars: BTreeSet<char> = corpus.into_iter().flat_map(|s| s.chars()).filter(|&c| c != ' ').collect();
        Special::COUNT + 1 + 256 + chars.len()
    }

    /// Learns merges greedily, most frequent pair first, until the vocabulary
    /// reaches `target_size` or no pair occurs at least twice.
    pub fn train<'a, I>(corpus: I, target_size: usize) -> Result<Self>
    where
        I: IntoIterator<Item = &'a str>,
        I::IntoIter: Clone,
    {
        let corpus = corpus.into_iter();
        let minimum = Self::minimum_size(corpus.clone());
        if target_size < minimum {
            return Err(Error::Vocab(format!(
                "target size {target_size} is below the minimum {minimum} for this corpus"
            )));
        }
        let mut tokens: Vec<Token> = Special::all().map(|s| Token::Special(s.name())).collect();
        tokens.push(Token::eow_marker());
        tokens.extend((0..=255u8).map(Token::Byte));
        let chars: BTreeSet<char> = corpus.clone().flat_map(|s| s.chars()).filter(|&c| c != ' ').collect();
        tokens.extend(chars.iter().map(|c| Token::piece(c.to_string())));
        let mut vocab = Self::from_parts(tokens, Vec::new())?;

        // Unique units in first-appearance order, with their frequencies.
        let mut index: HashMap<(&str, bool), usize> = HashMap::new();
        let mut words: Vec<(Vec<u32>, u64)> = Vec::new();
        for text in corpus {
            for unit in pre_tokenize(text) {
                let slot = *index.entry((unit.text, unit.eow)).or_insert_with(|| {
                    words.push((vocab.initial_symbols(unit), 0));
                    words.len() - 1
                });
                words[slot].1 += 1;
            }
        }

        while vocab.tokens.len() < target_size {
            // pair -> (count, first occurrence as (word, position))
            let mut counts: HashMap<(u32, u32), (u64, (usize, usize))> = HashMap::new();
            for (w, (symbols, freq)) in words.iter().enumerate() {
                for_each_pair(symbols, |pos, pair| {
                    let entry = counts.entry(pair).or_insert((0, (w, pos)));
                    entry.0 += freq;
                });
            }
            let best = counts
                .into_iter()
                .max_by(|(_, (ca, fa)), (_, (cb, fb))| ca.cmp(cb).then(fb.cmp(fa)));
            let Some((pair, (count, _))) = best else { break };
            if count < 2 {
                break;
            }
            let token = vocab.concat(pair.0, pair.1).expect("pairs are mergeable pieces");
            let merged = match vocab.id_of.get(&token) {
                Some(&id) => id,
                None => {
                    let id = vocab.tokens.len() as u32;
                    vocab.id_of.insert(token.clone(), id);
                    vocab.tokens.push(token);
                    id
                }
            };
            vocab.push_merge(pair.0, pair.1, merged);
            for (symbols, _) in &mut words {
                apply_merge(symbols, pair, merged);
            }
        }
        log::debug!("bpe: {} tokens, {} merges", vocab.tokens.len(), vocab.merges.len());
        Ok(vocab)
    }

    fn initial_symbols(&self, unit: Unit<'_>) -> Vec<u32> {
        let mut out = Vec::with_capacity(unit.text.len() + 1);
        let mut buf = [0u8; 4];
        for c in unit.text.chars() {
            match self.id_of.get(&Token::piece(c.encode_utf8(&mut buf) as &str)) {
                Some(&id) => out.push(id),
                None => out.extend(c.encode_utf8(&mut buf).bytes().map(|b| self.first_byte + b as u32)),
            }
        }
        if unit.eow {
            out.push(self.eow);
        }
        out
    }

    fn encode_unit(&self, unit: Unit<'_>, out: &mut Vec<u32>) {
        let mut symbols = self.initial_symbols(unit);
        loop {
            let best = symbols
                .windows(2)
                .filter_map(|w| self.merge_of.get(&(w[0], w[1])).map(|&(rank, merged)| (rank, (w[0], w[1]), merged)))
                .min_by_key(|&(rank, _, _)| rank);
            let Some((_, pair, merged)) = best else { break };
            apply_merge(&mut symbols, pair, merged);
        }
        out.extend_from_slice(&symbols);
    }

    /// Never fails and never yields a special-token id.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut out = Vec::new();
        for unit in pre_tokenize(text) {
            self.encode_unit(unit, &mut out);
        }
        out
    }

    /// Renders ids back to text; specials render as `<name>` when
    /// `show_specials`, otherwise as nothing.
    pub fn decode(&self, ids: &[u32], show_specials: bool) -> Result<String> {
        let mut bytes = Vec::new();
        let mut pending_space = false;
        for &id in ids {
            let token = self
                .tokens
                .get(id as usize)
                .ok_or_else(|| Error::Vocab(format!("id {id} out of range for {} tokens", self.tokens.len())))?;
            let emit: &[u8] = match token {
                Token::Special(_) if !show_specials => continue,
                Token::Special(name) => {
                    if std::mem::take(&mut pending_space) {
                        bytes.push(b' ');
                    }
                    bytes.push(b'<');
                    bytes.extend_from_slice(name.as_bytes());
                    bytes.push(b'>');
                    continue;
                }
                Token::Piece { text, .. } => text.as_bytes(),
                Token::Byte(b) => std::slice::from_ref(b),
            };
            if std::mem::take(&mut pending_space) {
                bytes.push(b' ');
            }
            bytes.extend_from_slice(emit);
            if let Token::Piece { eow: true, .. } = token {
                pending_space = true;
            }
        }
        Ok(match String::from_utf8(bytes) {
            Ok(s) => s,
            Err(e) => String::from_utf8_lossy(e.as_bytes()).into_owned(),
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn special(&self, s: Special) -> u32 {
        s.id()
    }

    pub fn token(&self, id: u32) -> Option<&Token> {
        self.tokens.get(id as usize)
    }

    pub fn id_of(&self, token: &Token) -> Option<u32> {
        self.id_of.get(token).copied()
    }

    pub fn merges(&self) -> &[(u32, u32)] {
        &self.merges
    }

    pub fn is_special(&self, id: u32) -> bool {
        (id as usize) < Special::COUNT
    }

    pub fn to_json(&self) -> String {
        let file = VocabFile {
            version: VOCAB_VERSION,
            specials: Special::all().map(|s| s.name()).collect(),
            tokens: self.tokens.clone(),
            merges: self.merges.clone(),
        };
        serde_json::to_string(&file).expect("vocabulary serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: VocabFile = serde_json::from_str(text)?;
        if file.version != VOCAB_VERSION {
            return Err(Error::Vocab(format!("unsupported version {}", file.version)));
        }
        let expected: Vec<String> = Special::all().map(|s| s.name()).collect();
        if file.specials != expected {
            return Err(Error::Vocab("special token list differs from this build".into()));
        }
        Self::from_parts(file.tokens, file.merges)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn piece_id(v: &Vocab, text: &str, eow: bool) -> u32 {
        v.id_of(&Token::Piece {
            text: text.into(),
            eow,
        })
        .unwrap()
    }

    #[test]
    fn special_ids_are_contiguous_and_invertible() {
        let ids: Vec<u32> = Special::all().map(Special::id).collect();
        assert_eq!(ids, (0..Special::COUNT as u32).collect::<Vec<_>>());
        assert_eq!(Special::COUNT, 28);
        for s in Special::all() {
            assert_eq!(Special::from_id(s.id()), Some(s));
        }
        assert_eq!(Special::from_id(28), None);
    }

    #[test]
    fn pre_tokenizer_units() {
        let u = pre_tokenize("hi, you\n");
        let texts: Vec<(&str, bool)> = u.iter().map(|u| (u.text, u.eow)).collect();
        assert_eq!(texts, vec![("hi", false), (",", true), ("you", false), ("\n", false), ("", true)]);
        assert!(pre_tokenize("").is_empty());
        assert_eq!(pre_tokenize(" ").len(), 2);
    }

    #[test]
    fn non_overlapping_pair_counts() {
        let mut seen = Vec::new();
        for_each_pair(&[1, 1, 1, 1], |_, p| seen.push(p));
        assert_eq!(seen, vec![(1, 1), (1, 1)]);
        seen.clear();
        for_each_pair(&[1, 1, 1], |_, p| seen.push(p));
        assert_eq!(seen, vec![(1, 1)]);
        seen.clear();
        for_each_pair(&[1, 2, 1, 2], |_, p| seen.push(p));
        assert_eq!(seen, vec![(1, 2), (2, 1), (1, 2)]);
    }

    #[test]
    fn hand_applied_merges() {
        let corpus = ["low low low"];
        let v = Vocab::train(corpus, Vocab::minimum_size(corpus) + 3).unwrap();
        // Merges: (l,o), (lo,w), (low,</w>) -> "low" is one word-final token.
        assert_eq!(v.merges().len(), 3);
        assert_eq!(v.encode("low"), vec![piece_id(&v, "low", true)]);
        assert_eq!(v.encode("lo"), vec![piece_id(&v, "lo", false), v.eow]);
    }

    #[test]
    fn zero_merge_budget_is_character_level() {
        let corpus = ["abc abc"];
        let v = Vocab::train(corpus, Vocab::minimum_size(corpus)).unwrap();
        assert!(v.merges().is_empty());
        assert_eq!(v.encode("ab").len(), 3);
        assert!(matches!(
            Vocab::train(corpus, Vocab::minimum_size(corpus) - 1),
            Err(Error::Vocab(_))
        ));
    }

    #[test]
    fn decode_flags_and_errors() {
        let v = Vocab::train(["hello world"], 400).unwrap();
        let pad = Special::Pad.id();
        assert_eq!(v.decode(&[pad, pad], false).unwrap(), "");
        let mut ids = v.encode("hello world");
        ids.push(Special::Eos.id());
        assert!(v.decode(&ids, true).unwrap().ends_with("<eos>"));
        assert_eq!(v.decode(&ids, false).unwrap(), "hello world");
        assert!(v.decode(&[v.len() as u32], false).is_err());
    }

    #[test]
    fn unseen_characters_use_bytes() {
        let v = Vocab::train(["abc"], 400).unwrap();
        let ids = v.encode("a\u{1F600}");
        assert!(ids.iter().any(|&i| matches!(v.token(i), Some(Token::Byte(_)))));
        assert_eq!(v.decode(&ids, false).unwrap(), "a\u{1F600}");
    }

    #[test]
    fn json_round_trip() {
        let v = Vocab::train(["the cat sat on the mat", "the hat"], 330).unwrap();
        let back = Vocab::from_json(&v.to_json()).unwrap();
        assert_eq!(back.tokens, v.tokens);
        assert_eq!(back.merges, v.merges);
        assert_eq!(back.encode("the cat"), v.encode("the cat"));
    }
}
