#![allow(dead_code)]

pub mod bpe;
pub mod oracles;

use empt_core::corpus::{self, Conversation, SampleOptions, TrainingSample};
use empt_core::model::ModelConfig;
use empt_core::Vocab;

pub fn corpus_vocab(corpus: &[Conversation], size: usize) -> Vocab {
    let texts: Vec<&str> = corpus
        .iter()
        .flat_map(|c| c.utterances.iter().map(|u| u.text.as_str()))
        .collect();
    Vocab::train(texts.iter().copied(), size).unwrap()
}

pub fn tiny_config(vocab: &Vocab) -> ModelConfig {
    ModelConfig {
        n_layers: 1,
        n_heads: 2,
        d_model: 8,
        d_ff: 16,
        max_positions: 64,
        vocab_size: vocab.len(),
        ..Default::default()
    }
}

pub struct Toy {
    pub corpus: Vec<Conversation>,
    pub vocab: Vocab,
    pub samples: Vec<TrainingSample>,
}

pub fn toy(n_conversations: usize, seed: u64) -> Toy {
    let corpus = corpus::synthetic_corpus(n_conversations, seed);
    let vocab = corpus_vocab(&corpus, 340);
    let samples = corpus::build_samples(&corpus, &SampleOptions::default(), seed).unwrap();
    Toy { corpus, vocab, samples }
}
