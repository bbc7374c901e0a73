//! Optimizer, learning-rate schedule and the per-stage training loop.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::checkpoint::{CheckpointError, CheckpointMeta, ModelCheckpoint};
use super::network::SeqBatch;
use super::{Model, ModelError};
use crate::rng::rng_for;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LrSchedule {
    /// Linear warmup, then decay with the inverse square root of the step.
    InverseSqrt,
    /// Linear warmup, then flat at `max_lr`.
    Constant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub dropout: f64,
    pub label_smoothing: f64,
    pub warmup_steps: u64,
    pub max_lr: f64,
    pub max_updates: u64,
    /// Upper bound on source plus target tokens per batch.
    pub batch_tokens: usize,
    pub seed: u64,
    pub schedule: LrSchedule,
    pub adam_betas: (f64, f64),
    pub adam_eps: f64,
    pub clip_norm: Option<f64>,
    /// Save (and validate) every this many updates, and after the last one.
    pub save_interval: u64,
    pub keep_last: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::bilingual()
    }
}

impl TrainConfig {
    /// Single-pair fine-tuning schedule, 100k updates.
    pub fn bilingual() -> Self {
        Self {
            dropout: 0.3,
            label_smoothing: 0.2,
            warmup_steps: 2500,
            max_lr: 3e-5,
            max_updates: 100_000,
            batch_tokens: 4096,
            seed: 0,
            schedule: LrSchedule::InverseSqrt,
            adam_betas: (0.9, 0.999),
            adam_eps: 1e-8,
            clip_norm: None,
            save_interval: 1000,
            keep_last: 10,
        }
    }

    /// Multilingual fine-tuning schedule, 300k updates.
    pub fn multilingual() -> Self {
        Self {
            max_updates: 300_000,
            ..Self::bilingual()
        }
    }

    /// Shrinks warmup, update budget and save interval by `scale`, keeping
    /// their ratios. At least one step of each survives.
    pub fn scaled(&self, scale: f64) -> Self {
        let s = |v: u64| ((v as f64 * scale).round() as u64).max(1);
        Self {
            warmup_steps: s(self.warmup_steps),
            max_updates: s(self.max_updates),
            save_interval: s(self.save_interval),
            ..self.clone()
        }
    }

    /// Settings that let a freshly initialized `tiny` model learn within a
    /// few thousand updates: a larger peak rate and lighter regularization.
    pub fn desk(&self, scale: f64) -> Self {
        Self {
            max_lr: 1e-3,
            dropout: 0.1,
            label_smoothing: 0.1,
            batch_tokens: 512,
            clip_norm: Some(1.0),
            ..self.scaled(scale)
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::InvalidConfig(m.to_string()));
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return bad("label_smoothing must be in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must be in [0, 1)");
        }
        if self.max_lr <= 0.0 || self.warmup_steps == 0 || self.max_updates == 0 {
            return bad("max_lr, warmup_steps and max_updates must be positive");
        }
        if self.batch_tokens == 0 || self.save_interval == 0 || self.keep_last == 0 {
            return bad("batch_tokens, save_interval and keep_last must be positive");
        }
        Ok(())
    }

    /// Learning rate for 1-based update `step`.
    pub fn lr(&self, step: u64) -> f64 {
        let (w, step) = (self.warmup_steps as f64, step.max(1) as f64);
        if step <= w {
            return self.max_lr * (step / w);
        }
        match self.schedule {
            LrSchedule::InverseSqrt => self.max_lr * (w / step).sqrt(),
            LrSchedule::Constant => self.max_lr,
        }
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    m: Vec<f32>,
    v: Vec<f32>,
    t: i32,
    b1: f64,
    b2: f64,
    eps: f64,
}

impl Adam {
    pub fn new(n: usize, betas: (f64, f64), eps: f64) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            b1: betas.0,
            b2: betas.1,
            eps,
        }
    }

    pub fn step(&mut self, params: &mut [f32], grads: &[f32], lr: f64) {
        self.t += 1;
        let (b1, b2) = (self.b1 as f32, self.b2 as f32);
        let c1 = 1.0 - self.b1.powi(self.t);
        let c2 = 1.0 - self.b2.powi(self.t);
        let step = (lr * c2.sqrt() / c1) as f32;
        let eps = (self.eps * c2.sqrt()) as f32;
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g;
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g;
            params[i] -= step * self.m[i] / (self.v[i].sqrt() + eps);
        }
    }
}

/// Supplies training batches; called once per update.
pub trait BatchSource {
    fn next_batch(&mut self, update: u64) -> SeqBatch;
}

impl<F: FnMut(u64) -> SeqBatch> BatchSource for F {
    fn next_batch(&mut self, update: u64) -> SeqBatch {
        self(update)
    }
}

/// Validation scores stamped on a checkpoint.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValidScores {
    pub nll: f64,
    pub bleu: Option<f64>,
}

/// A retained checkpoint and, when a directory was given, its file.
#[derive(Debug, Clone)]
pub struct SavedCheckpoint {
    pub checkpoint: ModelCheckpoint,
    pub path: Option<PathBuf>,
}

#[derive(Debug)]
pub struct StageOutcome {
    /// Retained checkpoints in update order.
    pub checkpoints: Vec<SavedCheckpoint>,
    /// Parameters after the last completed update.
    pub model: Model<f32>,
    /// Training loss (per-token mean) of every update.
    pub losses: Vec<f64>,
    /// Set when training stopped early on a non-finite loss.
    pub diverged: Option<ModelError>,
}

/// Options for a single training stage.
pub struct StageRun<'a> {
    pub name: &'a str,
    pub tcfg: &'a TrainConfig,
    pub out_dir: Option<&'a Path>,
    /// Attached to every checkpoint's metadata.
    pub vocab_text: Option<String>,
}

pub fn checkpoint_file(dir: &Path, updates: u64) -> PathBuf {
    dir.join(format!("checkpoint_{updates:07}.ckpt"))
}

/// Trains `model` for `tcfg.max_updates` updates.
///
/// Every `save_interval` updates (and after the final one) the model is
/// validated and checkpointed. The last `keep_last` checkpoints are kept,
/// plus the one with the lowest validation NLL. A non-finite loss stops
/// training; checkpoints saved before it are returned untouched.
pub fn train_stage(
    mut model: Model<f32>,
    data: &mut dyn BatchSource,
    run: &StageRun<'_>,
    validate: &mut dyn FnMut(&Model<f32>) -> ValidScores,
) -> Result<StageOutcome, ModelError> {
    let tcfg = run.tcfg;
    tcfg.validate()?;
    if let Some(dir) = run.out_dir {
        std::fs::create_dir_all(dir).map_err(|source| CheckpointError::Io {
            path: dir.display().to_string(),
            source,
        })?;
    }
    let n = model.params.len();
    let mut adam = Adam::new(n, tcfg.adam_betas, tcfg.adam_eps);
    let mut drop_rng = rng_for(tcfg.seed, &[0xd20]);
    let mut grads = vec![0f32; n];
    let mut kept: Vec<SavedCheckpoint> = Vec::new();
    let mut losses = Vec::with_capacity(tcfg.max_updates as usize);
    let mut diverged = None;

    for update in 1..=tcfg.max_updates {
        let batch = data.next_batch(update);
        grads.fill(0.0);
        let stats = model.loss_and_grad(
            &batch,
            tcfg.label_smoothing,
            tcfg.dropout,
            Some(&mut drop_rng),
            &mut grads,
        )?;
        let loss = stats.mean();
        let gnorm = grads.iter().map(|&g| (g as f64) * (g as f64)).sum::<f64>().sqrt();
        if !loss.is_finite() || !gnorm.is_finite() {
            log::error!("{}: non-finite loss at update {update}", run.name);
            diverged = Some(ModelError::Diverged { update, loss });
            break;
        }
        if let Some(clip) = tcfg.clip_norm {
            if gnorm > clip {
                let s = (clip / gnorm) as f32;
                grads.iter_mut().for_each(|g| *g *= s);
            }
        }
        adam.step(&mut model.params, &grads, tcfg.lr(update));
        losses.push(loss);

        if update % tcfg.save_interval == 0 || update == tcfg.max_updates {
            let scores = validate(&model);
            log::info!(
                "{} update {update}: train loss {loss:.4}, valid nll {:.4}, valid bleu {:?}",
                run.name,
                scores.nll,
                scores.bleu
            );
            let ckpt = ModelCheckpoint::from_model(
                &model,
                CheckpointMeta {
                    stage: run.name.to_string(),
                    updates: update,
                    valid_nll: Some(scores.nll),
                    valid_bleu: scores.bleu,
                    vocab: run.vocab_text.clone(),
                },
            );
            let path = match run.out_dir {
                Some(dir) => {
                    let p = checkpoint_file(dir, update);
                    ckpt.save(&p)?;
                    Some(p)
                }
                None => None,
            };
            kept.push(SavedCheckpoint { checkpoint: ckpt, path });
            prune(&mut kept, tcfg.keep_last)?;
        }
    }
    Ok(StageOutcome {
        checkpoints: kept,
        model,
        losses,
        diverged,
    })
}

/// Drops checkpoints outside the last `keep_last`, sparing the best by NLL.
fn prune(kept: &mut Vec<SavedCheckpoint>, keep_last: usize) -> Result<(), ModelError> {
    let best = best_by_nll(kept.iter().map(|s| &s.checkpoint));
    let cutoff = kept.len().saturating_sub(keep_last);
    let mut out = Vec::with_capacity(kept.len());
    for (i, s) in kept.drain(..).enumerate() {
        let keep = i >= cutoff || Some(s.checkpoint.meta.updates) == best;
        if keep {
            out.push(s);
        } else if let Some(p) = &s.path {
            std::fs::remove_file(p).map_err(|source| CheckpointError::Io {
                path: p.display().to_string(),
                source,
            })?;
        }
    }
    *kept = out;
    Ok(())
}

/// Update count of the checkpoint with the lowest validation NLL; ties go
/// to the later update.
pub fn best_by_nll<'a>(ckpts: impl Iterator<Item = &'a ModelCheckpoint>) -> Option<u64> {
    ckpts
        .filter_map(|c| c.meta.valid_nll.map(|nll| (nll, c.meta.updates)))
        .filter(|(nll, _)| !nll.is_nan())
        .min_by(|a, b| a.0.total_cmp(&b.0).then(b.1.cmp(&a.1)))
        .map(|(_, u)| u)
}
