//! Brute-force BPE merge oracle, sharing no code with the trainer.

use std::collections::HashSet;

use empt_core::{Special, Token, Vocab};

/// A symbol of the oracle: text and whether it closes a word.
pub type Sym = (String, bool);

/// Word pieces of the oracle: alphanumeric runs and single other chars,
/// the end-of-word mark on the last piece unless that is whitespace.
pub fn oracle_units(text: &str) -> Vec<Vec<Sym>> {
    if text.is_empty() {
        return Vec::new();
    }
    let mut out = Vec::new();
    for word in text.split(' ') {
        let mut pieces: Vec<String> = Vec::new();
        for c in word.chars() {
            match pieces.last_mut() {
                Some(p) if c.is_alphanumeric() && p.chars().last().is_some_and(char::is_alphanumeric) => p.push(c),
                _ => pieces.push(c.to_string()),
            }
        }
        let attach = pieces.last().is_some_and(|p| !p.chars().all(char::is_whitespace));
        let n = pieces.len();
        for (i, p) in pieces.into_iter().enumerate() {
            let mut syms: Vec<Sym> = p.chars().map(|c| (c.to_string(), false)).collect();
            if attach && i + 1 == n {
                syms.push((String::new(), true));
            }
            out.push(syms);
        }
        if !attach {
            out.push(vec![(String::new(), true)]);
        }
    }
    out
}

/// Left-to-right non-overlapping occurrences of `pair`.
fn occurrences(word: &[Sym], pair: (&Sym, &Sym)) -> Vec<usize> {
    let mut at = Vec::new();
    let mut i = 0;
    while i + 1 < word.len() {
        if (&word[i], &word[i + 1]) == pair {
            at.push(i);
            i += 2;
        } else {
            i += 1;
        }
    }
    at
}

/// Every corpus occurrence of every unit, re-scanned from scratch each
/// round: the most frequent pair wins, ties go to the earliest occurrence.
pub fn oracle_merges(corpus: &[&str], target: usize) -> Vec<(Sym, Sym)> {
    let mut words: Vec<Vec<Sym>> = corpus.iter().flat_map(|t| oracle_units(t)).collect();
    let chars: HashSet<char> = corpus.iter().flat_map(|t| t.chars()).filter(|&c| c != ' ').collect();
    let mut known: HashSet<Sym> = chars.iter().map(|c| (c.to_string(), false)).collect();
    let mut size = Special::COUNT + 1 + 256 + chars.len();
    let mut merges = Vec::new();
    while size < target {
        let mut best: Option<((Sym, Sym), usize, (usize, usize))> = None;
        for (w, word) in words.iter().enumerate() {
            for i in 0..word.len().saturating_sub(1) {
                let pair = (word[i].clone(), word[i + 1].clone());
                let count: usize = words.iter().map(|x| occurrences(x, (&pair.0, &pair.1)).len()).sum();
                let first = words
                    .iter()
                    .enumerate()
                    .find_map(|(k, x)| occurrences(x, (&pair.0, &pair.1)).first().map(|&p| (k, p)))
                    .unwrap();
                if first != (w, i) {
                    continue;
                }
                if best.as_ref().is_none_or(|b| count > b.1) {
                    best = Some((pair, count, first));
                }
            }
        }
        let Some((pair, count, _)) = best else { break };
        if count < 2 {
            break;
        }
        let merged: Sym = (format!("{}{}", pair.0 .0, pair.1 .0), pair.1 .1);
        if known.insert(merged.clone()) {
            size += 1;
        }
        for word in &mut words {
            let at = occurrences(word, (&pair.0, &pair.1));
            for &i in at.iter().rev() {
                word.splice(i..i + 2, [merged.clone()]);
            }
        }
        merges.push(pair);
    }
    merges
}

fn as_sym(vocab: &Vocab, id: u32) -> Sym {
    match vocab.token(id).unwrap() {
        Token::Piece { text, eow } => (text.clone(), *eow),
        other => panic!("merge over non-piece {other:?}"),
    }
}

pub fn trained_merges(vocab: &Vocab) -> Vec<(Sym, Sym)> {
    vocab.merges().iter().map(|&(a, b)| (as_sym(vocab, a), as_sym(vocab, b))).collect()
}
