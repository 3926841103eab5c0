//! Emotion-aware multi-head transformer for dialog: BPE tokenizer, corpus
//! pipeline, model with language-model, next-utterance and next-emotion
//! heads, training loop, nucleus decoding and evaluation metrics.

pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod decoder;
pub mod error;
pub mod eval;
pub mod input;
pub mod labels;
pub mod model;
pub mod rng;
pub mod tokenizer;
pub mod trainer;

pub use error::{Error, Result};
pub use labels::{Act, Emotion, Speaker, Topic};
pub use tokenizer::{Special, Token, Vocab};
