//! Wire types of `/api/chat` and `/api/meta`.

use std::collections::BTreeMap;

use empt_core::decoder::SamplingParams;
use empt_core::{Act, Emotion, Topic};
use serde::{Deserialize, Serialize};

/// 1 or 2 on the wire.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct SpeakerNo(u8);

impl SpeakerNo {
    pub fn speaker(self) -> empt_core::Speaker {
        if self.0 == 1 {
            empt_core::Speaker::First
        } else {
            empt_core::Speaker::Second
        }
    }
}

impl TryFrom<u8> for SpeakerNo {
    type Error = String;

    fn try_from(v: u8) -> Result<Self, String> {
        match v {
            1 | 2 => Ok(Self(v)),
            _ => Err(format!("speaker must be 1 or 2, got {v}")),
        }
    }
}

impl From<SpeakerNo> for u8 {
    fn from(s: SpeakerNo) -> u8 {
        s.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HistoryTurn {
    pub speaker: SpeakerNo,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub emotion: Option<Emotion>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub act: Option<Act>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChatRequest {
    pub topic: Topic,
    #[serde(default)]
    pub history: Vec<HistoryTurn>,
    /// Missing fields take the service defaults.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sampling: Option<SamplingParams>,
    /// Conditions the reply on this emotion instead of the predicted one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub force_emotion: Option<Emotion>,
    /// Act of the reply; inform when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub force_act: Option<Act>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub reply: String,
    pub predicted_emotion: Emotion,
    pub emotion_scores: BTreeMap<Emotion, f64>,
    /// The emotion the reply was generated under.
    pub emotion_used: Emotion,
    pub act_used: Act,
    pub token_count: usize,
    /// False when the token budget ran out before the end-of-reply token.
    pub finished: bool,
    pub model_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelInfo {
    pub config_hash: String,
    pub model_hash: String,
    pub n_layers: usize,
    pub d_model: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
    pub step: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Meta {
    pub emotions: Vec<Emotion>,
    pub acts: Vec<Act>,
    pub topics: Vec<Topic>,
    pub sampling: SamplingParams,
    pub model: ModelInfo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub field: Option<String>,
}
