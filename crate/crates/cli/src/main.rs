//! `empt`: tokenizer training, data preparation, training, evaluation,
//! generation and the chat server.
//!
//! Usage errors exit with 2, runtime failures with 1 after printing one
//! JSON line `{"error": ..., "field"?: ...}` to stderr. `EMPT_LOG` sets the
//! log level (default info).

mod history;

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use empt_core::checkpoint::{self, VocabRef};
use empt_core::config::RunConfig;
use empt_core::corpus::{self, Conversation, DailyDialogFiles, SampleCache, SampleOptions};
use empt_core::decoder::{self, ReplyConditioning, SamplingParams};
use empt_core::eval::{self, Averaging, EvalOptions};
use empt_core::model::Params;
use empt_core::trainer::{OutputDir, Trainer};
use empt_core::{Act, Emotion, Topic, Vocab};
use serde_json::json;

#[derive(Parser)]
#[command(name = "empt", version, about = "Multi-head transformer dialog model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a BPE vocabulary.
    BpeTrain(BpeTrain),
    /// Build a sample cache from a corpus.
    DataPrepare(DataPrepare),
    /// Train a model on a sample cache.
    Train(Train),
    /// Score a checkpoint on a sample cache and write a JSON report.
    Evaluate(Evaluate),
    /// Sample a reply.
    Generate(Generate),
    /// Serve /api/chat, /api/meta and the chat UI.
    Serve(Serve),
}

#[derive(Args)]
struct BpeTrain {
    /// JSON-lines corpus, DailyDialog directory, sample cache (.bin) or
    /// plain text with one or more utterances per line.
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value_t = 4000)]
    vocab_size: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DataPrepare {
    /// DailyDialog directory with the four dialogues_*.txt files.
    #[arg(long, conflicts_with_all = ["corpus", "synthetic"])]
    data_dir: Option<PathBuf>,
    /// Read the split directory `<data-dir>/<split>` instead.
    #[arg(long, requires = "data_dir")]
    split: Option<String>,
    /// JSON-lines corpus.
    #[arg(long, conflicts_with = "synthetic")]
    corpus: Option<PathBuf>,
    /// Generate this many synthetic conversations.
    #[arg(long)]
    synthetic: Option<usize>,
    #[arg(long, default_value_t = 2)]
    window: usize,
    #[arg(long, default_value_t = 1)]
    utt_distractors: usize,
    #[arg(long, default_value_t = 1)]
    emo_distractors: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Train {
    /// JSON run config; missing fields take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Sample cache from data-prepare.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Continue from a checkpoint with optimiser state.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Vocabulary to use; by default one is trained on the cache's
    /// conversations with `data.vocab_size`.
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Override a config field, e.g. `--set model.n_layers=2`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Log every this many steps.
    #[arg(long, default_value_t = 10)]
    log_every: u64,
}

#[derive(Args)]
struct Sampling {
    #[arg(long, default_value_t = 0.9)]
    p: f64,
    #[arg(long, default_value_t = 0.7)]
    temp: f64,
    #[arg(long, default_value_t = 40)]
    max_new_tokens: usize,
}

impl Sampling {
    fn params(&self, seed: u64) -> SamplingParams {
        SamplingParams {
            p: self.p,
            temperature: self.temp,
            max_new_tokens: self.max_new_tokens,
            seed,
        }
    }
}

#[derive(Args)]
struct Evaluate {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 19)]
    distractors: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Report path; the summary also goes to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Leave the no-emotion class out of precision, recall and F1.
    #[arg(long)]
    exclude_no_emotion: bool,
    /// Micro- instead of macro-averaged emotion scores.
    #[arg(long)]
    micro: bool,
    /// Only the first N positions.
    #[arg(long)]
    limit: Option<usize>,
    #[command(flatten)]
    sampling: Sampling,
}

#[derive(Args)]
struct Generate {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    topic: Topic,
    /// File or inline text: a JSON array of utterances or labeled turns, or
    /// utterances separated by newlines or `__eou__`.
    #[arg(long, default_value = "")]
    history: String,
    /// Reply emotion; predicted from the history when absent.
    #[arg(long)]
    emotion: Option<Emotion>,
    #[arg(long, default_value = "inform")]
    act: Act,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Print a JSON object instead of the bare reply.
    #[arg(long)]
    json: bool,
    #[command(flatten)]
    sampling: Sampling,
}

#[derive(Args)]
struct Serve {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, default_value = "127.0.0.1:8080")]
    addr: String,
    /// Directory of the built chat UI.
    #[arg(long = "static")]
    static_dir: Option<PathBuf>,
    #[command(flatten)]
    sampling: Sampling,
}

fn main() {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("EMPT_LOG", "info")).init();
    let result = match cli.command {
        Command::BpeTrain(a) => bpe_train(a),
        Command::DataPrepare(a) => data_prepare(a),
        Command::Train(a) => train(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Generate(a) => generate(a),
        Command::Serve(a) => serve(a),
    };
    if let Err(e) = result {
        let field = e.chain().find_map(|c| match c.downcast_ref::<empt_core::Error>() {
            Some(empt_core::Error::Config { field, .. }) => Some(field.clone()),
            _ => None,
        });
        let mut line = json!({ "error": format!("{e:#}") });
        if let Some(f) = field {
            line["field"] = json!(f);
        }
        eprintln!("{line}");
        std::process::exit(1);
    }
}

fn print_json(value: &impl serde::Serialize) -> Result<()> {
    println!("{}", serde_json::to_string(value)?);
    Ok(())
}

fn utterance_texts(path: &Path) -> Result<Vec<String>> {
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
    let conversations: Vec<Conversation> = if path.is_dir() {
        corpus::load_dailydialog(&DailyDialogFiles::in_dir(path))?
    } else if ext == "bin" {
        SampleCache::load(path)?.conversations
    } else if ext == "jsonl" {
        corpus::load_jsonl(path)?
    } else {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        return Ok(text
            .lines()
            .flat_map(|l| l.split("__eou__"))
            .map(str::trim)
            .filter(|u| !u.is_empty())
            .map(String::from)
            .collect());
    };
    Ok(conversations
        .into_iter()
        .flat_map(|c| c.utterances.into_iter().map(|u| u.text))
        .collect())
}

fn train_vocab(texts: &[String], size: usize) -> Result<Vocab> {
    let vocab = Vocab::train(texts.iter().map(String::as_str), size)?;
    if vocab.len() < size {
        log::warn!("corpus supports only {} of the {size} requested symbols", vocab.len());
    }
    Ok(vocab)
}

fn create_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}

fn bpe_train(a: BpeTrain) -> Result<()> {
    let texts = utterance_texts(&a.corpus)?;
    let vocab = train_vocab(&texts, a.vocab_size)?;
    create_parent(&a.out)?;
    vocab.save(&a.out)?;
    print_json(&json!({
        "vocab": a.out,
        "size": vocab.len(),
        "merges": vocab.merges().len(),
        "utterances": texts.len(),
    }))
}

fn data_prepare(a: DataPrepare) -> Result<()> {
    let conversations = match (&a.data_dir, &a.corpus, a.synthetic) {
        (Some(dir), _, _) => {
            let files = match &a.split {
                Some(s) => DailyDialogFiles::split(dir, s),
                None => DailyDialogFiles::in_dir(dir),
            };
            corpus::load_dailydialog(&files)?
        }
        (None, Some(path), _) => corpus::load_corpus(path)?,
        (None, None, Some(n)) => corpus::synthetic_corpus(n, a.seed),
        (None, None, None) => bail!("one of --data-dir, --corpus or --synthetic is required"),
    };
    let options = SampleOptions {
        history_window: a.window,
        n_utt_distractors: a.utt_distractors,
        n_emo_distractors: a.emo_distractors,
    };
    let cache = SampleCache::build(conversations, options, a.seed)?;
    create_parent(&a.out)?;
    cache.save(&a.out)?;
    log::info!(
        "{} conversations, {} groups, {} samples -> {}",
        cache.manifest.n_conversations,
        cache.manifest.n_groups,
        cache.manifest.n_samples,
        a.out.display()
    );
    print_json(&cache.manifest)
}

fn train(a: Train) -> Result<()> {
    let base = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let mut config = base.with_overrides(&a.overrides)?;
    let cache = SampleCache::load(&a.data)?;
    if cache.manifest.options != config.data.samples {
        log::warn!(
            "the cache was built with {:?}; using it instead of the configured {:?}",
            cache.manifest.options,
            config.data.samples
        );
        config.data.samples = cache.manifest.options;
    }
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;

    let vocab = match &a.vocab {
        Some(p) => Vocab::load(p)?,
        None => {
            let texts: Vec<String> = cache
                .conversations
                .iter()
                .flat_map(|c| c.utterances.iter().map(|u| u.text.clone()))
                .collect();
            train_vocab(&texts, config.data.vocab_size)?
        }
    };
    match config.model.vocab_size {
        0 => config.model.vocab_size = vocab.len(),
        n if n != vocab.len() => {
            return Err(empt_core::Error::Config {
                field: "model.vocab_size".into(),
                detail: format!("{n} but the vocabulary has {}", vocab.len()),
            }
            .into())
        }
        _ => {}
    }
    config.validate()?;

    let vocab_path = a.out.join("vocab.json");
    vocab.save(&vocab_path)?;
    let config_path = a.out.join("config.json");
    std::fs::write(&config_path, config.to_json()).with_context(|| format!("writing {}", config_path.display()))?;

    let mut trainer = match &a.resume {
        Some(p) => {
            let t = Trainer::resume(p, config.train.clone(), config.seed)?;
            if t.params.config() != &config.model {
                bail!("{} was trained with a different model config", p.display());
            }
            t
        }
        None => Trainer::new(Params::init(&config.model, config.seed)?, config.train.clone(), config.seed)?,
    };
    let out = OutputDir {
        dir: a.out.clone(),
        vocab: VocabRef {
            path: "vocab.json".into(),
            sha256: checkpoint::file_sha256(&vocab_path)?,
        },
    };
    let total = config.train.total_steps(corpus::groups(&cache.samples).len());
    log::info!(
        "training {} parameters for {total} steps from step {}",
        trainer.params.num_params(),
        trainer.step()
    );
    let every = a.log_every.max(1);
    let metrics = trainer.run(&vocab, &cache.samples, Some(&out), |m| {
        if m.step % every == 0 || m.step == total {
            log::info!(
                "step {}/{total} lr {:.3e} total {:.4} grad_norm {:.3}",
                m.step,
                m.lr,
                m.total,
                m.grad_norm
            );
        }
    })?;
    print_json(&json!({
        "checkpoint": a.out.join("model.ckpt"),
        "steps": trainer.step(),
        "last": metrics.last(),
    }))
}

fn load_model(ckpt: &Path) -> Result<(Params<f32>, Vocab, checkpoint::Sidecar)> {
    let loaded = checkpoint::load(ckpt)?;
    let (vocab, _) = checkpoint::load_vocab(ckpt, &loaded.sidecar)?;
    Ok((loaded.params, vocab, loaded.sidecar))
}

fn evaluate(a: Evaluate) -> Result<()> {
    let (model, vocab, sidecar) = load_model(&a.ckpt)?;
    let cache = SampleCache::load(&a.data)?;
    let mut positions = eval::eval_positions(
        &cache.conversations,
        cache.manifest.options.history_window,
        a.distractors,
        a.seed,
    )?;
    if let Some(n) = a.limit {
        positions.truncate(n);
    }
    let opts = EvalOptions {
        exclude_no_emotion: a.exclude_no_emotion,
        averaging: if a.micro { Averaging::Micro } else { Averaging::Macro },
        sampling: a.sampling.params(a.seed),
        seed: a.seed,
        config_hash: sidecar.model.hash(),
    };
    let report = eval::evaluate(&model, &vocab, &positions, &opts)?;
    if let Some(out) = &a.out {
        create_parent(out)?;
        std::fs::write(out, serde_json::to_string_pretty(&report)?).with_context(|| format!("writing {}", out.display()))?;
    }
    print_json(&json!({
        "positions": report.n_positions,
        "hit_at_1": report.hit_at_1,
        "ppl": serde_json::to_value(&report)?["ppl"],
        "bleu": report.bleu,
        "token_f1": report.token_f1,
        "emotion_precision": report.emotion_precision,
        "emotion_recall": report.emotion_recall,
        "emotion_f1": report.emotion_f1,
    }))
}

fn generate(a: Generate) -> Result<()> {
    let (model, vocab, _) = load_model(&a.ckpt)?;
    let history = history::read(&a.history)?;
    let params = a.sampling.params(a.seed);
    let (emotion, predicted) = match a.emotion {
        Some(e) => (e, false),
        None => {
            let scores = model.predict_emotion(&vocab, a.topic, &history, Some(a.act))?;
            (scores[0].emotion, true)
        }
    };
    let cond = ReplyConditioning {
        topic: a.topic,
        emotion: Some(emotion),
        act: Some(a.act),
    };
    let reply = decoder::generate(&model, &vocab, &history, cond, &params, 0)?;
    if a.json {
        print_json(&json!({
            "reply": reply.text,
            "token_ids": reply.token_ids,
            "finished": reply.finished,
            "emotion": emotion,
            "emotion_predicted": predicted,
            "act": a.act,
        }))
    } else {
        println!("{}", reply.text);
        Ok(())
    }
}

fn serve(a: Serve) -> Result<()> {
    let defaults = a.sampling.params(0);
    defaults.validate()?;
    let runtime = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    runtime.block_on(empt_serve::serve(&a.addr, a.ckpt, a.static_dir, defaults))
}
