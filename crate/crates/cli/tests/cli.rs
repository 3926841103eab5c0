use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpStream;
use std::path::Path;
use std::process::{Command, Output, Stdio};
use std::time::{Duration, Instant};

use serde_json::Value;

fn empt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_empt"))
        .args(args)
        .env("EMPT_LOG", "warn")
        .output()
        .expect("runs the binary")
}

fn ok(args: &[&str]) -> String {
    let out = empt(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

const TINY: [&str; 18] = [
    "--set", "model.n_layers=1",
    "--set", "model.n_heads=2",
    "--set", "model.d_model=16",
    "--set", "model.d_ff=32",
    "--set", "model.max_positions=96",
    "--set", "train.max_steps=4",
    "--set", "train.batch_size=2",
    "--set", "train.grad_accum_steps=1",
    "--set", "train.checkpoint_every=2",
];

/// Cache and vocabulary under `dir`.
fn prepare(dir: &Path) -> (String, String) {
    let cache = dir.join("data/cache.bin").display().to_string();
    let vocab = dir.join("data/vocab.json").display().to_string();
    let manifest: Value = serde_json::from_str(&ok(&["data-prepare", "--synthetic", "8", "--seed", "3", "--out", &cache])).unwrap();
    assert_eq!(manifest["n_conversations"], 8);
    let summary: Value = serde_json::from_str(&ok(&["bpe-train", "--corpus", &cache, "--vocab-size", "320", "--out", &vocab])).unwrap();
    assert_eq!(summary["size"], 320);
    (cache, vocab)
}

fn train(cache: &str, vocab: &str, out: &Path, extra: &[&str]) {
    let out = out.display().to_string();
    let mut args = vec!["train", "--data", cache, "--vocab", vocab, "--out", &out];
    args.extend_from_slice(extra);
    ok(&args);
}

#[test]
fn pipeline_runs_end_to_end_and_repeats() {
    let dir = tempfile::tempdir().unwrap();
    let (cache, vocab) = prepare(dir.path());
    let run = dir.path().join("runs/a");
    train(&cache, &vocab, &run, &TINY);
    for f in ["model.ckpt", "model.ckpt.json", "ckpt-000002.ckpt", "config.json", "vocab.json"] {
        assert!(run.join(f).exists(), "{f} missing");
    }
    let metrics = std::fs::read_to_string(run.join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 4);
    let first: Value = serde_json::from_str(metrics.lines().next().unwrap()).unwrap();
    for key in ["step", "lr", "L1", "L2", "L3", "total", "grad_norm"] {
        assert!(first.get(key).is_some(), "metrics lack {key}");
    }

    // The echoed config alone reproduces the run.
    let again = dir.path().join("runs/b");
    let config = run.join("config.json").display().to_string();
    train(&cache, &vocab, &again, &["--config", &config]);
    let bytes = |p: &Path| std::fs::read(p).unwrap();
    assert_eq!(bytes(&run.join("model.ckpt")), bytes(&again.join("model.ckpt")));
    assert_eq!(bytes(&run.join("metrics.jsonl")), bytes(&again.join("metrics.jsonl")));

    // Resuming from the step-2 checkpoint lands on the same weights.
    let resumed = dir.path().join("runs/c");
    let ckpt2 = run.join("ckpt-000002.ckpt").display().to_string();
    train(&cache, &vocab, &resumed, &["--config", &config, "--resume", &ckpt2]);
    assert_eq!(bytes(&run.join("model.ckpt")), bytes(&resumed.join("model.ckpt")));
    let tail: Vec<&str> = metrics.lines().skip(2).collect();
    let resumed_metrics = std::fs::read_to_string(resumed.join("metrics.jsonl")).unwrap();
    assert_eq!(resumed_metrics.lines().collect::<Vec<_>>(), tail);

    let ckpt = run.join("model.ckpt").display().to_string();
    let gen = |seed: &str| {
        ok(&[
            "generate", "--ckpt", &ckpt, "--topic", "work", "--history", "hello there __eou__ hi , how are you ?",
            "--seed", seed, "--max-new-tokens", "10", "--json",
        ])
    };
    let g1 = gen("7");
    assert_eq!(g1, gen("7"));
    let reply: Value = serde_json::from_str(&g1).unwrap();
    assert_eq!(reply["emotion_predicted"], true);
    assert!(reply["token_ids"].as_array().unwrap().len() <= 10);

    let report = dir.path().join("report.json");
    let report_arg = report.display().to_string();
    let eval = || {
        ok(&[
            "evaluate", "--ckpt", &ckpt, "--data", &cache, "--distractors", "3", "--seed", "2",
            "--out", &report_arg, "--limit", "6", "--max-new-tokens", "8",
        ]);
        std::fs::read(&report).unwrap()
    };
    let r1 = eval();
    assert_eq!(r1, eval());
    let r: Value = serde_json::from_slice(&r1).unwrap();
    assert_eq!(r["n_positions"], 6);
    assert_eq!(r["n_distractors"], 3);
    assert_eq!(r["seed"], 2);
    assert_eq!(r["config_hash"].as_str().unwrap().len(), 64);
    for key in ["hit_at_1", "ppl", "bleu", "token_f1", "emotion_precision", "emotion_recall", "emotion_f1", "emotion_confusion"] {
        assert!(r.get(key).is_some(), "report lacks {key}");
    }
}

#[test]
fn usage_errors_exit_with_2() {
    let out = empt(&["evaluate", "--data", "x.bin"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--ckpt"));
    let out = empt(&["train", "--data", "x", "--out", "y", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(2));
    let out = empt(&["generate", "--ckpt", "m.ckpt", "--topic", "sports"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(empt(&["--help"]).status.success());
}

#[test]
fn runtime_errors_are_one_json_line() {
    let dir = tempfile::tempdir().unwrap();
    let (cache, vocab) = prepare(dir.path());
    let out_dir = dir.path().join("bad").display().to_string();
    let out = empt(&["train", "--data", &cache, "--vocab", &vocab, "--out", &out_dir, "--set", "model.n_layer=3"]);
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8(out.stderr).unwrap();
    assert_eq!(stderr.trim_end().lines().count(), 1, "{stderr}");
    let err: Value = serde_json::from_str(stderr.trim()).unwrap();
    assert_eq!(err["field"], "model.n_layer");

    let out = empt(&["evaluate", "--ckpt", "/nonexistent/model.ckpt", "--data", &cache]);
    assert_eq!(out.status.code(), Some(1));
    let err: Value = serde_json::from_str(String::from_utf8(out.stderr).unwrap().trim()).unwrap();
    assert!(err["error"].as_str().unwrap().contains("nonexistent"));
}

fn http_get(addr: &str, path: &str) -> Option<(u16, String)> {
    let mut s = TcpStream::connect(addr).ok()?;
    s.set_read_timeout(Some(Duration::from_secs(10))).ok()?;
    write!(s, "GET {path} HTTP/1.1\r\nHost: {addr}\r\nConnection: close\r\n\r\n").ok()?;
    let mut text = String::new();
    s.read_to_string(&mut text).ok()?;
    let status = text.split_whitespace().nth(1)?.parse().ok()?;
    let body = text.split_once("\r\n\r\n")?.1.to_string();
    Some((status, body))
}

#[test]
fn serve_answers_meta_and_static_files() {
    let dir = tempfile::tempdir().unwrap();
    let (cache, vocab) = prepare(dir.path());
    let run = dir.path().join("run");
    train(&cache, &vocab, &run, &TINY);
    let ui = dir.path().join("ui");
    std::fs::create_dir(&ui).unwrap();
    std::fs::write(ui.join("index.html"), "chat ui").unwrap();

    let mut child = Command::new(env!("CARGO_BIN_EXE_empt"))
        .args(["serve", "--ckpt", &run.join("model.ckpt").display().to_string(), "--addr", "127.0.0.1:0"])
        .args(["--static", &ui.display().to_string()])
        .env("EMPT_LOG", "info")
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    let mut lines = BufReader::new(child.stderr.take().unwrap()).lines();
    let addr = loop {
        let line = lines.next().expect("server exited").unwrap();
        if let Some((_, a)) = line.split_once("listening on ") {
            break a.trim().to_string();
        }
    };
    let started = Instant::now();
    let meta = loop {
        match http_get(&addr, "/api/meta") {
            Some((200, body)) => break body,
            Some((503, _)) | None if started.elapsed() < Duration::from_secs(30) => {
                std::thread::sleep(Duration::from_millis(50))
            }
            other => panic!("unexpected reply {other:?}"),
        }
    };
    let meta: Value = serde_json::from_str(&meta).unwrap();
    assert_eq!(meta["emotions"].as_array().unwrap().len(), 7);
    assert_eq!(meta["sampling"]["p"], 0.9);
    assert_eq!(http_get(&addr, "/").unwrap(), (200, "chat ui".into()));
    child.kill().unwrap();
    child.wait().unwrap();
}
