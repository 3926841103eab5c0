//! Optimisation loop: Adam with linear decay to zero, global-norm clipping,
//! gradient accumulation, checkpoints and a JSON-lines metric log.

use std::io::Write;
use std::path::{Path, PathBuf};

use empt_tensor::{Real, Tape, Tensor};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, Sidecar, VocabRef};
use crate::corpus::{self, TrainingSample};
use crate::error::{Error, Result};
use crate::input::{build_input, InputRepr};
use crate::model::{LossReport, Params};
use crate::rng::{self, Purpose};
use crate::tokenizer::Vocab;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: f64,
    pub grad_accum_steps: usize,
    /// Conversation positions (sample groups) per micro-batch.
    pub batch_size: usize,
    pub epochs: usize,
    /// Save a numbered checkpoint every this many steps; 0 saves only the final one.
    pub checkpoint_every: u64,
    /// Optional cap on optimiser steps; the decay schedule ends at the cap.
    pub max_steps: Option<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 6.25e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 1.0,
            grad_accum_steps: 8,
            batch_size: 4,
            epochs: 20,
            checkpoint_every: 0,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("train.lr", "must be positive"));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::config("train.clip_norm", "must be positive"));
        }
        if self.grad_accum_steps == 0 {
            return Err(Error::config("train.grad_accum_steps", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("train.beta1", "betas must lie in [0, 1)"));
        }
        if !(self.eps > 0.0) {
            return Err(Error::config("train.eps", "must be positive"));
        }
        Ok(())
    }

    pub fn groups_per_step(&self) -> usize {
        self.batch_size * self.grad_accum_steps
    }

    pub fn steps_per_epoch(&self, n_groups: usize) -> u64 {
        n_groups.div_ceil(self.groups_per_step()) as u64
    }

    pub fn total_steps(&self, n_groups: usize) -> u64 {
        let full = self.epochs as u64 * self.steps_per_epoch(n_groups);
        self.max_steps.map_or(full, |m| m.min(full))
    }
}

/// `base_lr * (1 - step / total_steps)`, clamped to 0 past the end.
pub fn schedule_lr(step: u64, total_steps: u64, base_lr: f64) -> f64 {
    if step > total_steps {
        log::warn!("step {step} is past the schedule end {total_steps}; learning rate clamped to 0");
        return 0.0;
    }
    if total_steps == 0 {
        return 0.0;
    }
    base_lr * (1.0 - step as f64 / total_steps as f64)
}

/// Scales all gradients by `max_norm / norm` when the global L2 norm
/// exceeds `max_norm`. Returns the norm before clipping.
pub fn clip_global_norm<T: Real>(grads: &mut [Vec<T>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|&x| {
            let x = x.to_f64_lossy();
            x * x
        })
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = T::from_f64_lossy(max_norm / norm);
        for g in grads.iter_mut() {
            for x in g.iter_mut() {
                *x *= s;
            }
        }
    }
    norm
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    /// Updates applied so far.
    pub step: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &[Tensor<T>]) -> Self {
        Self {
            m: params.iter().map(|p| vec![T::zero(); p.numel()]).collect(),
            v: params.iter().map(|p| vec![T::zero(); p.numel()]).collect(),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update at learning rate `lr`. A non-finite
/// gradient aborts before anything is modified.
pub fn adam_step<T: Real>(
    params: &mut [Tensor<T>],
    names: &[String],
    grads: &[Vec<T>],
    state: &mut AdamState<T>,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    for (i, g) in grads.iter().enumerate() {
        if g.len() != params[i].numel() || state.m[i].len() != g.len() {
            return Err(Error::Invalid(format!("gradient shape mismatch for {}", names[i])));
        }
        if g.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite {
                what: format!("gradient of {}", names[i]),
                step: state.step,
            });
        }
    }
    let t = state.step as i32 + 1;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (i, g) in grads.iter().enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, p) in params[i].data_mut().iter_mut().enumerate() {
            let gj = g[j].to_f64_lossy();
            let mj = b1 * m[j].to_f64_lossy() + (1.0 - b1) * gj;
            let vj = b2 * v[j].to_f64_lossy() + (1.0 - b2) * gj * gj;
            m[j] = T::from_f64_lossy(mj);
            v[j] = T::from_f64_lossy(vj);
            let update = lr * (mj / c1) / ((vj / c2).sqrt() + cfg.eps);
            *p = T::from_f64_lossy(p.to_f64_lossy() - update);
        }
    }
    state.step += 1;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub lr: f64,
    #[serde(rename = "L1")]
    pub l1: Option<f64>,
    #[serde(rename = "L2")]
    pub l2: Option<f64>,
    #[serde(rename = "L3")]
    pub l3: Option<f64>,
    pub total: f64,
    pub grad_norm: f64,
}

fn mean_of(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let (sum, n) = values.flatten().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Where checkpoints and the metric log go.
#[derive(Debug, Clone)]
pub struct OutputDir {
    pub dir: PathBuf,
    pub vocab: VocabRef,
}

pub struct Trainer {
    pub params: Params<f32>,
    pub adam: AdamState<f32>,
    pub config: TrainConfig,
    pub seed: u64,
}

impl Trainer {
    pub fn new(params: Params<f32>, config: TrainConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let adam = AdamState::new(params.tensors());
        Ok(Self {
            params,
            adam,
            config,
            seed,
        })
    }

    /// Continues from a checkpoint written by [`Trainer::save`].
    pub fn resume(path: impl AsRef<Path>, config: TrainConfig, seed: u64) -> Result<Self> {
        let loaded = checkpoint::load(path.as_ref())?;
        config.validate()?;
        let adam = loaded
            .adam
            .ok_or_else(|| Error::Serde("checkpoint has no optimiser state to resume from".into()))?;
        if loaded.sidecar.seed != seed {
            log::warn!("resuming with seed {seed}, checkpoint was written with {}", loaded.sidecar.seed);
        }
        Ok(Self {
            params: loaded.params,
            adam,
            config,
            seed,
        })
    }

    pub fn step(&self) -> u64 {
        self.adam.step
    }

    /// Groups processed by optimiser step `step` (0-based), in order.
    pub fn step_groups(&self, n_groups: usize, step: u64) -> Vec<usize> {
        let spe = self.config.steps_per_epoch(n_groups);
        let epoch = step / spe;
        let k = (step % spe) as usize;
        let mut order: Vec<usize> = (0..n_groups).collect();
        order.shuffle(&mut rng::stream(self.seed, Purpose::Shuffle, epoch));
        let per = self.config.groups_per_step();
        order[k * per..((k + 1) * per).min(n_groups)].to_vec()
    }

    /// Runs one optimiser step over `groups`. Every group's loss is weighted
    /// by 1/len(groups), so accumulating micro-batches reproduces the
    /// single large batch. Dropout draws from the stream of this step.
    pub fn train_step(&mut self, vocab: &Vocab, groups: &[&[TrainingSample]], total_steps: u64) -> Result<StepMetrics> {
        let step = self.adam.step;
        let opts = self.params.config().input_options();
        let mut rng = rng::stream(self.seed, Purpose::Dropout, step);
        let mut grads: Vec<Vec<f32>> = self.params.tensors().iter().map(|t| vec![0.0; t.numel()]).collect();
        let weight = 1.0 / groups.len() as f32;
        let mut reports: Vec<LossReport> = Vec::with_capacity(groups.len());
        for group in groups {
            let inputs: Vec<(&TrainingSample, InputRepr)> = group
                .iter()
                .map(|s| Ok((s, build_input(s, vocab, &opts)?)))
                .collect::<Result<_>>()?;
            let mut tape = Tape::new();
            let bound = self.params.bind(&mut tape, true);
            let (total, report) = self.params.group_loss(&mut tape, &bound, &inputs, Some(&mut rng))?;
            if !report.total.is_finite() {
                return Err(Error::NonFinite {
                    what: "loss".into(),
                    step,
                });
            }
            let scaled = tape.scale(total, weight);
            tape.backward(scaled)?;
            for (acc, &v) in grads.iter_mut().zip(bound.vars()) {
                if let Some(g) = tape.grad(v) {
                    acc.iter_mut().zip(g).for_each(|(a, &x)| *a += x);
                }
            }
            reports.push(report);
        }
        let grad_norm = clip_global_norm(&mut grads, self.config.clip_norm);
        let lr = schedule_lr(step, total_steps, self.config.lr);
        let names = self.params.names().to_vec();
        adam_step(self.params.tensors_mut(), &names, &grads, &mut self.adam, lr, &self.config)?;
        if let Some(i) = self.params.tensors().iter().position(|t| !t.is_finite()) {
            return Err(Error::NonFinite {
                what: format!("parameter {}", names[i]),
                step,
            });
        }
        Ok(StepMetrics {
            step: step + 1,
            lr,
            l1: mean_of(reports.iter().map(|r| r.l1)),
            l2: mean_of(reports.iter().map(|r| r.l2)),
            l3: mean_of(reports.iter().map(|r| r.l3)),
            total: reports.iter().map(|r| r.total).sum::<f64>() / reports.len() as f64,
            grad_norm,
        })
    }

    pub fn sidecar(&self, vocab: &VocabRef, total_steps: u64) -> Sidecar {
        Sidecar::new(self.params.config().clone(), vocab.clone(), self.adam.step, total_steps, self.seed, self.config.clone())
    }

    pub fn save(&self, path: &Path, vocab: &VocabRef, total_steps: u64) -> Result<()> {
        checkpoint::save(path, &self.params, Some(&self.adam), &self.sidecar(vocab, total_steps))
    }

    /// Trains until the schedule ends. With an output directory, appends one
    /// JSON line per step to `metrics.jsonl` and writes checkpoints; on a
    /// non-finite loss the pre-step state is saved as `last-good.ckpt`.
    pub fn run(
        &mut self,
        vocab: &Vocab,
        samples: &[TrainingSample],
        out: Option<&OutputDir>,
        mut on_step: impl FnMut(&StepMetrics),
    ) -> Result<Vec<StepMetrics>> {
        let ranges = corpus::groups(samples);
        if ranges.is_empty() {
            return Err(Error::Invalid("no training samples".into()));
        }
        let total_steps = self.config.total_steps(ranges.len());
        let mut log = match out {
            Some(o) => {
                std::fs::create_dir_all(&o.dir).map_err(|e| Error::io(&o.dir, e))?;
                let path = o.dir.join("metrics.jsonl");
                let file = std::fs::OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(&path)
                    .map_err(|e| Error::io(&path, e))?;
                Some((path, std::io::BufWriter::new(file)))
            }
            None => None,
        };
        let mut history = Vec::new();
        while self.adam.step < total_steps {
            let step = self.adam.step;
            let ids = self.step_groups(ranges.len(), step);
            let groups: Vec<&[TrainingSample]> = ids.iter().map(|&g| &samples[ranges[g].clone()]).collect();
            let snapshot = out.map(|_| (self.params.clone(), self.adam.clone()));
            let metrics = match self.train_step(vocab, &groups, total_steps) {
                Ok(m) => m,
                Err(e @ Error::NonFinite { .. }) => {
                    if let (Some(o), Some((params, adam))) = (out, snapshot) {
                        self.params = params;
                        self.adam = adam;
                        self.save(&o.dir.join("last-good.ckpt"), &o.vocab, total_steps)?;
                        log::error!("halting at step {step}: {e}; last good state saved");
                    }
                    return Err(e);
                }
                Err(e) => return Err(e),
            };
            if let Some((path, w)) = log.as_mut() {
                let line = serde_json::to_string(&metrics)?;
                writeln!(w, "{line}").and_then(|_| w.flush()).map_err(|e| Error::io(path.as_path(), e))?;
            }
            on_step(&metrics);
            history.push(metrics);
            if let Some(o) = out {
                let every = self.config.checkpoint_every;
                if every > 0 && self.adam.step % every == 0 && self.adam.step < total_steps {
                    self.save(&o.dir.join(format!("ckpt-{:06}.ckpt", self.adam.step)), &o.vocab, total_steps)?;
                }
            }
        }
        if let Some(o) = out {
            self.save(&o.dir.join("model.ckpt"), &o.vocab, total_steps)?;
        }
        Ok(history)
    }
}
