//! Decoder-only transformer with three heads: a language-model head tied to
//! the token embedding, a next-utterance head read at the cls position and
//! a next-emotion head read at the position before it.

use empt_tensor::{Real, Tape, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::Digest;

use crate::corpus::{Source, TrainingSample};
use crate::error::{Error, Result};
use crate::input::{self, CandidateSpec, InputOptions, InputRepr, Turn};
use crate::labels::{Act, Emotion, Topic};
use crate::rng::{self, Purpose, StreamRng};
use crate::tokenizer::{Special, Vocab};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum HeadVariant {
    /// Each sequence is classified on its own with labels {0, 1}.
    #[default]
    Binary,
    /// Candidates of one position compete in a softmax over `z1 - z0`.
    MultipleChoice,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub max_positions: usize,
    /// 0 means "take the size of the trained vocabulary".
    pub vocab_size: usize,
    pub n_emotions: usize,
    pub n_actions: usize,
    pub n_topics: usize,
    pub embd_dropout: f64,
    pub resid_dropout: f64,
    pub attn_dropout: f64,
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    pub use_topic: bool,
    pub use_emotion: bool,
    pub use_action: bool,
    pub head_variant: HeadVariant,
    /// Also trains the emotion head at the candidate's speaker token, the
    /// readout position that emotion prediction uses at inference.
    pub emotion_stub_readout: bool,
    pub layer_norm_eps: f64,
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 2,
            n_heads: 4,
            d_model: 128,
            d_ff: 512,
            max_positions: 256,
            vocab_size: 0,
            n_emotions: Emotion::COUNT,
            n_actions: Act::COUNT,
            n_topics: Topic::COUNT,
            embd_dropout: 0.1,
            resid_dropout: 0.1,
            attn_dropout: 0.1,
            c1: 1.0,
            c2: 1.0,
            c3: 1.0,
            use_topic: true,
            use_emotion: true,
            use_action: true,
            head_variant: HeadVariant::Binary,
            emotion_stub_readout: true,
            layer_norm_eps: 1e-5,
            init_std: 0.02,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("max_positions", self.max_positions),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("model.{field}"), "must be positive"));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::config(
                "model.n_heads",
                format!("d_model {} is not divisible by {} heads", self.d_model, self.n_heads),
            ));
        }
        let fixed = [
            ("n_emotions", self.n_emotions, Emotion::COUNT),
            ("n_actions", self.n_actions, Act::COUNT),
            ("n_topics", self.n_topics, Topic::COUNT),
        ];
        for (field, v, want) in fixed {
            if v != want {
                return Err(Error::config(format!("model.{field}"), format!("must be {want}")));
            }
        }
        for (field, c) in [("c1", self.c1), ("c2", self.c2), ("c3", self.c3)] {
            if !(c >= 0.0 && c.is_finite()) {
                return Err(Error::config(format!("model.{field}"), "loss coefficients must be >= 0"));
            }
        }
        for (field, r) in [
            ("embd_dropout", self.embd_dropout),
            ("resid_dropout", self.resid_dropout),
            ("attn_dropout", self.attn_dropout),
        ] {
            if !(0.0..1.0).contains(&r) {
                return Err(Error::config(format!("model.{field}"), "must lie in [0, 1)"));
            }
        }
        if !(self.layer_norm_eps > 0.0) {
            return Err(Error::config("model.layer_norm_eps", "must be positive"));
        }
        if self.vocab_size != 0 && self.vocab_size < Special::COUNT + 257 {
            return Err(Error::config("model.vocab_size", "smaller than the reserved tokens"));
        }
        Ok(())
    }

    pub fn input_options(&self) -> InputOptions {
        InputOptions {
            max_len: self.max_positions,
            use_topic: self.use_topic,
            use_emotion: self.use_emotion,
            use_action: self.use_action,
        }
    }

    /// sha256 of the compact JSON form.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config serialises");
        hex::encode(sha2::Sha256::digest(text.as_bytes()))
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// V·d + P·d + (E+1)·d + (A+1)·d + L·(4d² + 2df + 9d + f) + 2d + 4d,
    /// the last term being the two bias-free 2-way heads.
    pub fn param_count(&self) -> usize {
        let (d, f, l) = (self.d_model, self.d_ff, self.n_layers);
        let emb = (self.vocab_size + self.max_positions + self.n_emotions + 1 + self.n_actions + 1) * d;
        emb + l * (4 * d * d + 2 * d * f + 9 * d + f) + 2 * d + 4 * d
    }
}

/// Parameter slots; per-block slots repeat after `BLOCK_BASE`.
mod slot {
    pub const TOK: usize = 0;
    pub const POS: usize = 1;
    pub const EMO: usize = 2;
    pub const ACT: usize = 3;
    pub const BLOCK_BASE: usize = 4;
    pub const PER_BLOCK: usize = 12;
    pub const LN1_G: usize = 0;
    pub const LN1_B: usize = 1;
    pub const W_QKV: usize = 2;
    pub const B_QKV: usize = 3;
    pub const W_O: usize = 4;
    pub const B_O: usize = 5;
    pub const LN2_G: usize = 6;
    pub const LN2_B: usize = 7;
    pub const W_FC: usize = 8;
    pub const B_FC: usize = 9;
    pub const W_PROJ: usize = 10;
    pub const B_PROJ: usize = 11;
}

const BLOCK_NAMES: [&str; slot::PER_BLOCK] = [
    "ln1.gain", "ln1.bias", "attn.qkv.weight", "attn.qkv.bias", "attn.out.weight", "attn.out.bias", "ln2.gain",
    "ln2.bias", "mlp.fc.weight", "mlp.fc.bias", "mlp.proj.weight", "mlp.proj.bias",
];

#[derive(Debug, Clone, PartialEq)]
pub struct Params<T: Real> {
    config: ModelConfig,
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

/// Which of the two classification heads to read.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Head {
    NextUtterance,
    NextEmotion,
}

/// Parameter vars registered on one tape.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Vars registered by the caller, one per parameter tensor in order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput<T> {
    pub hidden: Tensor<T>,
    pub lm_logits: Tensor<T>,
    pub utterance_logits: [T; 2],
    pub emotion_logits: [T; 2],
}

/// Per-group loss terms; `None` marks a term with no applicable sequence.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub l1: Option<f64>,
    pub l2: Option<f64>,
    pub l3: Option<f64>,
    pub total: f64,
}

/// `c1·L1 + c2·L2 + c3·L3`, absent terms contributing 0.
pub fn total_loss(l1: Option<f64>, l2: Option<f64>, l3: Option<f64>, c: [f64; 3]) -> Result<f64> {
    if let Some(i) = c.iter().position(|&x| !(x >= 0.0)) {
        return Err(Error::config(format!("model.c{}", i + 1), "loss coefficients must be >= 0"));
    }
    Ok([l1, l2, l3]
        .iter()
        .zip(c)
        .map(|(l, c)| l.map_or(0.0, |l| c * l))
        .sum())
}

impl<T: Real> Params<T> {
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        if config.vocab_size == 0 {
            return Err(Error::config("model.vocab_size", "must be set before initialisation"));
        }
        let mut rng = rng::stream(seed, Purpose::Init, 0);
        let normal = Normal::new(0.0, config.init_std).map_err(|e| Error::config("model.init_std", e.to_string()))?;
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        let (d, f) = (config.d_model, config.d_ff);
        let mut add = |name: String, shape: Vec<usize>, fill: Option<f64>| {
            let n: usize = shape.iter().product();
            let data = (0..n)
                .map(|_| T::from_f64_lossy(fill.unwrap_or_else(|| normal.sample(&mut rng))))
                .collect();
            names.push(name);
            tensors.push(Tensor::new(shape, data).expect("shape matches data"));
        };
        add("tok_emb".into(), vec![config.vocab_size, d], None);
        add("pos_emb".into(), vec![config.max_positions, d], None);
        add("emotion_emb".into(), vec![config.n_emotions + 1, d], None);
        add("action_emb".into(), vec![config.n_actions + 1, d], None);
        for l in 0..config.n_layers {
            let shapes: [(Vec<usize>, Option<f64>); slot::PER_BLOCK] = [
                (vec![d], Some(1.0)),
                (vec![d], Some(0.0)),
                (vec![d, 3 * d], None),
                (vec![3 * d], Some(0.0)),
                (vec![d, d], None),
                (vec![d], Some(0.0)),
                (vec![d], Some(1.0)),
                (vec![d], Some(0.0)),
                (vec![d, f], None),
                (vec![f], Some(0.0)),
                (vec![f, d], None),
                (vec![d], Some(0.0)),
            ];
            for (name, (shape, fill)) in BLOCK_NAMES.iter().zip(shapes) {
                add(format!("blocks.{l}.{name}"), shape, fill);
            }
        }
        add("ln_f.gain".into(), vec![d], Some(1.0));
        add("ln_f.bias".into(), vec![d], Some(0.0));
        add("head.next_utterance".into(), vec![d, 2], None);
        add("head.next_emotion".into(), vec![d, 2], None);
        Ok(Self {
            config: config.clone(),
            names,
            tensors,
        })
    }

    /// Rebuilds parameters from named tensors, checking every expected shape.
    pub fn from_named(config: &ModelConfig, mut named: Vec<(String, Tensor<T>)>) -> Result<Self> {
        let template = Params::<T>::init_shapes(config)?;
        let mut tensors = Vec::with_capacity(template.len());
        let mut names = Vec::with_capacity(template.len());
        for (name, shape) in template {
            let pos = named
                .iter()
                .position(|(n, _)| *n == name)
                .ok_or_else(|| Error::Serde(format!("checkpoint lacks parameter {name}")))?;
            let (_, t) = named.swap_remove(pos);
            if t.shape() != shape.as_slice() {
                return Err(Error::Serde(format!(
                    "parameter {name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            names.push(name);
            tensors.push(t);
        }
        Ok(Self {
            config: config.clone(),
            names,
            tensors,
        })
    }

    fn init_shapes(config: &ModelConfig) -> Result<Vec<(String, Vec<usize>)>> {
        let mut small = config.clone();
        small.init_std = 1.0;
        let p = Params::<f32>::init(&small, 0)?;
        Ok(p.names.into_iter().zip(p.tensors.iter().map(|t| t.shape().to_vec())).collect())
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn named(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &mut self.tensors[i])
    }

    pub fn num_params(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn token_embedding(&self) -> &Tensor<T> {
        &self.tensors[slot::TOK]
    }

    /// The LM output projection. It is the token embedding itself.
    pub fn lm_head(&self) -> &Tensor<T> {
        &self.tensors[slot::TOK]
    }

    pub fn cast<U: Real>(&self) -> Params<U> {
        Params {
            config: self.config.clone(),
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }

    pub fn bind<'a>(&'a self, tape: &mut Tape<'a, T>, requires_grad: bool) -> Bound {
        Bound {
            vars: self.tensors.iter().map(|t| tape.leaf_ref(t, requires_grad)).collect(),
        }
    }

    fn block(&self, b: &Bound, layer: usize, which: usize) -> Var {
        b.vars[slot::BLOCK_BASE + layer * slot::PER_BLOCK + which]
    }

    fn tail(&self, b: &Bound, offset: usize) -> Var {
        b.vars[slot::BLOCK_BASE + self.config.n_layers * slot::PER_BLOCK + offset]
    }

    /// Hidden states after the final layer norm, one row per position.
    /// Dropout is active exactly when `rng` is given.
    pub fn hidden<'a>(
        &self,
        tape: &mut Tape<'a, T>,
        b: &Bound,
        input: &InputRepr,
        mut rng: Option<&mut StreamRng>,
    ) -> Result<Var> {
        let cfg = &self.config;
        let n = input.len();
        if n == 0 {
            return Err(Error::Invalid("empty input".into()));
        }
        if n > cfg.max_positions {
            return Err(Error::Overflow(format!("{n} positions exceed max_positions {}", cfg.max_positions)));
        }
        input.check();
        let idx = |v: &[u32]| v.iter().map(|&i| i as usize).collect::<Vec<_>>();
        let eps = T::from_f64_lossy(cfg.layer_norm_eps);
        let mut dropout = |tape: &mut Tape<'a, T>, x: Var, rate: f64| -> Result<Var> {
            Ok(match rng.as_deref_mut() {
                Some(r) if rate > 0.0 => tape.dropout(x, rate, r)?,
                _ => x,
            })
        };

        let tok = tape.gather_rows(b.vars[slot::TOK], &idx(&input.token_ids))?;
        let pos = tape.gather_rows(b.vars[slot::POS], &idx(&input.position_ids))?;
        let emo = tape.gather_rows(b.vars[slot::EMO], &idx(&input.emotion_ids))?;
        let act = tape.gather_rows(b.vars[slot::ACT], &idx(&input.action_ids))?;
        let mut x = tape.add(tok, pos)?;
        x = tape.add(x, emo)?;
        x = tape.add(x, act)?;
        x = dropout(tape, x, cfg.embd_dropout)?;

        let (d, dh) = (cfg.d_model, cfg.d_head());
        let scale = T::from_f64_lossy(1.0 / (dh as f64).sqrt());
        for l in 0..cfg.n_layers {
            let p = |w| self.block(b, l, w);
            let a = tape.layer_norm(x, p(slot::LN1_G), p(slot::LN1_B), eps)?;
            let qkv = tape.matmul(a, p(slot::W_QKV))?;
            let qkv = tape.add_bias(qkv, p(slot::B_QKV))?;
            let mut heads = Vec::with_capacity(cfg.n_heads);
            for h in 0..cfg.n_heads {
                let q = tape.slice_cols(qkv, h * dh, dh)?;
                let k = tape.slice_cols(qkv, d + h * dh, dh)?;
                let v = tape.slice_cols(qkv, 2 * d + h * dh, dh)?;
                let s = tape.matmul_nt(q, k)?;
                let s = tape.scale(s, scale);
                let probs = tape.softmax(s, true)?;
                let probs = dropout(tape, probs, cfg.attn_dropout)?;
                heads.push(tape.matmul(probs, v)?);
            }
            let attn = if heads.len() == 1 { heads[0] } else { tape.concat_cols(&heads)? };
            let attn = tape.matmul(attn, p(slot::W_O))?;
            let attn = tape.add_bias(attn, p(slot::B_O))?;
            let attn = dropout(tape, attn, cfg.resid_dropout)?;
            x = tape.add(x, attn)?;

            let m = tape.layer_norm(x, p(slot::LN2_G), p(slot::LN2_B), eps)?;
            let m = tape.matmul(m, p(slot::W_FC))?;
            let m = tape.add_bias(m, p(slot::B_FC))?;
            let m = tape.gelu(m);
            let m = tape.matmul(m, p(slot::W_PROJ))?;
            let m = tape.add_bias(m, p(slot::B_PROJ))?;
            let m = dropout(tape, m, cfg.resid_dropout)?;
            x = tape.add(x, m)?;
        }
        Ok(tape.layer_norm(x, self.tail(b, 0), self.tail(b, 1), eps)?)
    }

    /// Vocabulary logits at the given positions, through the tied embedding.
    pub fn lm_logits<'a>(&self, tape: &mut Tape<'a, T>, b: &Bound, hidden: Var, rows: &[usize]) -> Result<Var> {
        let h = tape.gather_rows(hidden, rows)?;
        Ok(tape.matmul_nt(h, b.vars[slot::TOK])?)
    }

    /// The 2 logits of `head` read at position `row`.
    pub fn head_logits<'a>(
        &self,
        tape: &mut Tape<'a, T>,
        b: &Bound,
        hidden: Var,
        row: usize,
        head: Head,
    ) -> Result<Var> {
        let h = tape.gather_rows(hidden, &[row])?;
        let w = match head {
            Head::NextUtterance => self.tail(b, 2),
            Head::NextEmotion => self.tail(b, 3),
        };
        Ok(tape.matmul(h, w)?)
    }

    /// Var of the tied token-embedding / LM-projection matrix.
    pub fn lm_head_var(&self, b: &Bound) -> Var {
        b.vars[slot::TOK]
    }

    pub fn token_embedding_var(&self, b: &Bound) -> Var {
        b.vars[slot::TOK]
    }

    pub fn forward(&self, input: &InputRepr, rng: Option<&mut StreamRng>) -> Result<ForwardOutput<T>> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape, false);
        let h = self.hidden(&mut tape, &b, input, rng)?;
        let rows: Vec<usize> = (0..input.len()).collect();
        let lm = self.lm_logits(&mut tape, &b, h, &rows)?;
        let cls = input.cls();
        let u = self.head_logits(&mut tape, &b, h, cls, Head::NextUtterance)?;
        let e = self.head_logits(&mut tape, &b, h, cls.saturating_sub(1), Head::NextEmotion)?;
        let pair = |v: &[T]| [v[0], v[1]];
        Ok(ForwardOutput {
            hidden: tape.tensor(h),
            lm_logits: tape.tensor(lm),
            utterance_logits: pair(tape.value(u)),
            emotion_logits: pair(tape.value(e)),
        })
    }

    /// Builds the losses of one group of sequences on `tape` and returns the
    /// weighted total. Utterance distractors get no LM or emotion loss.
    pub fn group_loss<'a>(
        &self,
        tape: &mut Tape<'a, T>,
        b: &Bound,
        group: &[(&TrainingSample, InputRepr)],
        mut rng: Option<&mut StreamRng>,
    ) -> Result<(Var, LossReport)> {
        let cfg = &self.config;
        let mut l1_terms = Vec::new();
        let mut utt = Vec::new(); // (logits var, label, is candidate set member)
        let mut emo = Vec::new();
        for (sample, input) in group {
            let h = self.hidden(tape, b, input, rng.as_deref_mut())?;
            if sample.is_gold_utterance {
                let targets = input.lm_targets();
                if targets.is_empty() {
                    return Err(Error::Invalid("sample has an empty candidate span".into()));
                }
                let rows: Vec<usize> = targets.iter().map(|t| t.0).collect();
                let ids: Vec<usize> = targets.iter().map(|t| t.1 as usize).collect();
                let logits = self.lm_logits(tape, b, h, &rows)?;
                l1_terms.push(tape.cross_entropy(logits, &ids)?);
            }
            let label = usize::from(sample.is_gold_utterance);
            let z = self.head_logits(tape, b, h, input.cls(), Head::NextUtterance)?;
            if cfg.head_variant == HeadVariant::Binary || sample.source != Source::EmotionDistractor {
                utt.push((z, label, sample.is_gold()));
            }
            if cfg.use_emotion && sample.is_gold_utterance {
                let eos = input.eos.ok_or_else(|| Error::Invalid("training input lacks eos".into()))?;
                let label = usize::from(sample.is_gold_emotion);
                let mut readouts = vec![self.head_logits(tape, b, h, eos, Head::NextEmotion)?];
                if cfg.emotion_stub_readout {
                    readouts.push(self.head_logits(tape, b, h, input.candidate_start, Head::NextEmotion)?);
                }
                emo.push((readouts, label, sample.is_gold()));
            }
        }

        let l1 = mean(tape, &l1_terms)?;
        let l2 = match cfg.head_variant {
            HeadVariant::Binary => {
                let terms = utt
                    .iter()
                    .map(|&(z, label, _)| tape.cross_entropy(z, &[label]))
                    .collect::<std::result::Result<Vec<_>, _>>()?;
                mean(tape, &terms)?
            }
            HeadVariant::MultipleChoice => {
                let cands: Vec<(Var, bool)> = utt.iter().map(|&(z, _, gold)| (z, gold)).collect();
                choice_loss(tape, &cands)?
            }
        };
        let l3 = match cfg.head_variant {
            HeadVariant::Binary => {
                let mut terms = Vec::new();
                for (readouts, label, _) in &emo {
                    let parts = readouts
                        .iter()
                        .map(|&z| tape.cross_entropy(z, &[*label]))
                        .collect::<std::result::Result<Vec<_>, _>>()?;
                    terms.push(mean(tape, &parts)?.expect("at least one readout"));
                }
                mean(tape, &terms)?
            }
            HeadVariant::MultipleChoice => {
                let n_readouts = emo.first().map_or(0, |e| e.0.len());
                let mut parts = Vec::new();
                for r in 0..n_readouts {
                    let cands: Vec<(Var, bool)> = emo.iter().map(|(zs, _, gold)| (zs[r], *gold)).collect();
                    if let Some(l) = choice_loss(tape, &cands)? {
                        parts.push(l);
                    }
                }
                mean(tape, &parts)?
            }
        };

        let mut total: Option<Var> = None;
        for (term, c) in [(l1, cfg.c1), (l2, cfg.c2), (l3, cfg.c3)] {
            if let Some(v) = term {
                if c > 0.0 {
                    let scaled = tape.scale(v, T::from_f64_lossy(c));
                    total = Some(match total {
                        Some(t) => tape.add(t, scaled)?,
                        None => scaled,
                    });
                }
            }
        }
        let total = match total {
            Some(t) => t,
            None => tape.leaf(Tensor::scalar(T::zero()), false),
        };
        let read = |v: Option<Var>| v.map(|v| tape.scalar(v).to_f64_lossy());
        let report = LossReport {
            l1: read(l1),
            l2: read(l2),
            l3: read(l3),
            total: tape.scalar(total).to_f64_lossy(),
        };
        Ok((total, report))
    }

    /// Margin `z1 - z0` of `head` at `row` for one input (eval mode).
    pub fn margin(&self, input: &InputRepr, row: usize, head: Head) -> Result<f64> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape, false);
        let h = self.hidden(&mut tape, &b, input, None)?;
        let z = self.head_logits(&mut tape, &b, h, row, head)?;
        let z = tape.value(z);
        Ok((z[1] - z[0]).to_f64_lossy())
    }

    /// Next-utterance score of a full candidate input, as a logit margin.
    pub fn utterance_margin(&self, input: &InputRepr) -> Result<f64> {
        self.margin(input, input.cls(), Head::NextUtterance)
    }

    /// Mean negative log-likelihood of the candidate text and eos, with the
    /// number of predicted tokens.
    pub fn candidate_nll(&self, input: &InputRepr) -> Result<(f64, usize)> {
        let targets = input.lm_targets();
        if targets.is_empty() {
            return Err(Error::Invalid("input has no candidate span".into()));
        }
        let mut tape = Tape::new();
        let b = self.bind(&mut tape, false);
        let h = self.hidden(&mut tape, &b, input, None)?;
        let rows: Vec<usize> = targets.iter().map(|t| t.0).collect();
        let ids: Vec<usize> = targets.iter().map(|t| t.1 as usize).collect();
        let logits = self.lm_logits(&mut tape, &b, h, &rows)?;
        let ce = tape.cross_entropy(logits, &ids)?;
        Ok((tape.scalar(ce).to_f64_lossy(), ids.len()))
    }

    /// Scores each emotion as the reply emotion after `history`, using a
    /// candidate stub `[speaker]` that carries the emotion and `act`.
    /// Sorted by score descending; ties keep label order.
    pub fn predict_emotion(
        &self,
        vocab: &Vocab,
        topic: Topic,
        history: &[Turn],
        act: Option<Act>,
    ) -> Result<Vec<EmotionScore>> {
        let opts = self.config.input_options();
        let speaker = input::next_speaker(history);
        let mut scores = Vec::with_capacity(Emotion::COUNT);
        for &e in Emotion::ALL {
            let spec = CandidateSpec {
                speaker,
                text: None,
                emotion: Some(e),
                act,
            };
            let stub = input::assemble(vocab, topic, history, spec, 0, &opts)?;
            let margin = self.margin(&stub, stub.candidate_start, Head::NextEmotion)?;
            scores.push(EmotionScore {
                emotion: e,
                margin,
                score: sigmoid_open(margin),
            });
        }
        scores.sort_by(|a, b| b.margin.total_cmp(&a.margin).then(a.emotion.cmp(&b.emotion)));
        Ok(scores)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EmotionScore {
    pub emotion: Emotion,
    pub margin: f64,
    /// P(e = 1), kept strictly inside (0, 1).
    pub score: f64,
}

/// Logistic function clamped away from exactly 0 and 1.
pub fn sigmoid_open(x: f64) -> f64 {
    let p = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    p.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

fn mean<T: Real>(tape: &mut Tape<'_, T>, terms: &[Var]) -> Result<Option<Var>> {
    let Some((&first, rest)) = terms.split_first() else {
        return Ok(None);
    };
    let mut acc = first;
    for &t in rest {
        acc = tape.add(acc, t)?;
    }
    Ok(Some(if terms.len() == 1 {
        acc
    } else {
        tape.scale(acc, T::from_f64_lossy(1.0 / terms.len() as f64))
    }))
}

/// Softmax cross-entropy over candidate margins, target = the gold one.
fn choice_loss<T: Real>(tape: &mut Tape<'_, T>, cands: &[(Var, bool)]) -> Result<Option<Var>> {
    let Some(gold) = cands.iter().position(|c| c.1) else {
        return Ok(None);
    };
    if cands.len() < 2 {
        return Ok(None);
    }
    let diff = tape.leaf(Tensor::from_f64([2, 1], &[-1.0, 1.0])?, false);
    let margins = cands
        .iter()
        .map(|&(z, _)| tape.matmul(z, diff))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let row = tape.concat_cols(&margins)?;
    Ok(Some(tape.cross_entropy(row, &[gold])?))
}

/// Random-id input of length `n` for shape and causality probes.
pub fn random_input(config: &ModelConfig, n: usize, rng: &mut impl Rng) -> InputRepr {
    let v = config.vocab_size as u32;
    let mut r = InputRepr {
        token_ids: (0..n).map(|_| rng.random_range(0..v)).collect(),
        position_ids: (0..n as u32).collect(),
        emotion_ids: (0..n).map(|_| rng.random_range(0..=config.n_emotions as u32)).collect(),
        action_ids: (0..n).map(|_| rng.random_range(0..=config.n_actions as u32)).collect(),
        candidate_start: n.saturating_sub(2),
        eos: None,
    };
    if n >= 3 {
        r.eos = Some(n - 2);
        r.candidate_start = n - 3;
    }
    r
}
