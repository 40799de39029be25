//! Training the composed denoiser: each scene contributes
//! ‖ε − (ε_θ(x_t|∅) + Σ_k ε_θ(x_t|c^k))‖² at a fresh (ε, t), averaged over
//! pixels and over the batch.

use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::concept::ConceptSet;
use crate::denoiser::{Cond, DenoiserParams, Network};
use crate::error::{check_len, param, Error, Result};
use crate::rng::stream;
use crate::schedule::{noise_image, NoiseSample, NoiseSchedule};
use crate::world::SceneDataset;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Optimizer {
    PlainSgd,
    AdaptiveMoment { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::AdaptiveMoment { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub step_budget: usize,
    pub optimizer: Optimizer,
    pub seed: u64,
    pub gradient_clip_norm: Option<f64>,
    /// Call the checkpoint hook every this many steps.
    pub checkpoint_every: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 32,
            step_budget: 10_000,
            optimizer: Optimizer::default(),
            seed: 0,
            gradient_clip_norm: None,
            checkpoint_every: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(param("learning_rate", "must be finite and non-negative"));
        }
        if self.batch_size < 1 {
            return Err(param("batch_size", "must be at least 1"));
        }
        if self.step_budget < 1 {
            return Err(param("step_budget", "must be at least 1"));
        }
        if let Some(c) = self.gradient_clip_norm {
            if !(c > 0.0) {
                return Err(param("gradient_clip_norm", "must be positive when set"));
            }
        }
        Ok(())
    }
}

/// Mutable training state: parameters plus optimizer moments.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub params: DenoiserParams,
    pub schedule: NoiseSchedule,
    m: Vec<f64>,
    v: Vec<f64>,
    steps: usize,
}

/// One training example: a clean image and its full concept set.
pub type Example<'a> = (&'a [f64], &'a ConceptSet);

impl Trainer {
    pub fn new(params: DenoiserParams, schedule: NoiseSchedule) -> Self {
        let n = params.param_count();
        Self { params, schedule, m: vec![0.0; n], v: vec![0.0; n], steps: 0 }
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Loss and gradient for a batch at the given per-scene draws, without
    /// updating anything. Loss is the batch mean of per-pixel mean residuals.
    pub fn loss_and_grad(&self, batch: &[Example], draws: &[NoiseSample]) -> Result<(f64, Vec<f64>)> {
        if batch.is_empty() {
            return Err(param("batch", "must not be empty"));
        }
        check_len(batch.len(), draws.len())?;
        let net = Network::new(&self.params, &self.schedule)?;
        let len = self.params.arch.image.len();
        let weight = 1.0 / (batch.len() * len) as f64;
        let per_scene: Vec<Result<(f64, Vec<f64>)>> = batch
            .par_iter()
            .zip(draws.par_iter())
            .map(|((x0, set), draw)| {
                check_len(len, x0.len())?;
                let xt = noise_image(x0, draw, &self.schedule)?;
                let mut conds = vec![Cond::Base];
                conds.extend(set.concepts.iter().map(|c| Cond::Concept(&c.values)));
                let mut g = vec![0.0; self.params.param_count()];
                let loss = net.accumulate_param_grads(&xt, draw.timestep, &conds, &draw.epsilon, weight, &mut g);
                Ok((loss * weight, g))
            })
            .collect();
        let mut total = 0.0;
        let mut grad = vec![0.0; self.params.param_count()];
        // fixed reduction order
        for r in per_scene {
            let (l, g) = r?;
            total += l;
            grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
        }
        Ok((total, grad))
    }

    /// One optimizer update on `batch`, drawing ε and t per scene from `rng`.
    /// Returns the pre-update batch loss.
    pub fn train_step<R: Rng + ?Sized>(&mut self, batch: &[Example], cfg: &TrainConfig, rng: &mut R) -> Result<f64> {
        cfg.validate()?;
        let len = self.params.arch.image.len();
        let full = self.schedule.full_range();
        let draws: Vec<NoiseSample> = batch.iter().map(|_| NoiseSample::draw(rng, len, &self.schedule, full)).collect();
        let (loss, mut grad) = self.loss_and_grad(batch, &draws)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step: self.steps });
        }
        if let Some(clip) = cfg.gradient_clip_norm {
            let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            if norm > clip {
                grad.iter_mut().for_each(|g| *g *= clip / norm);
            }
        }
        self.steps += 1;
        let lr = cfg.learning_rate;
        match cfg.optimizer {
            Optimizer::PlainSgd => {
                for (p, g) in self.params.values.iter_mut().zip(&grad) {
                    *p = (*p as f64 - lr * g) as f32;
                }
            }
            Optimizer::AdaptiveMoment { beta1, beta2, eps } => {
                let t = self.steps as i32;
                let (c1, c2) = (1.0 - beta1.powi(t), 1.0 - beta2.powi(t));
                for i in 0..grad.len() {
                    let g = grad[i];
                    self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
                    self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
                    let update = lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + eps);
                    self.params.values[i] = (self.params.values[i] as f64 - update) as f32;
                }
            }
        }
        if self.params.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteLoss { step: self.steps - 1 });
        }
        Ok(loss)
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub losses: Vec<f64>,
    pub params: DenoiserParams,
    pub wall_clock_secs: f64,
    pub steps: usize,
}

/// Trailing-window mean of a loss trace (`window` values, fewer at the start).
pub fn smoothed(losses: &[f64], window: usize) -> Vec<f64> {
    let w = window.max(1);
    (0..losses.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(w);
            losses[lo..=i].iter().sum::<f64>() / (i + 1 - lo) as f64
        })
        .collect()
}

/// Runs `step_budget` steps with batches drawn uniformly with replacement.
/// `on_checkpoint(step, params)` is called at the configured cadence and
/// after the final step.
pub fn train_loop(
    dataset: &SceneDataset,
    init: DenoiserParams,
    schedule: &NoiseSchedule,
    cfg: &TrainConfig,
    mut on_checkpoint: impl FnMut(usize, &DenoiserParams) -> Result<()>,
) -> Result<TrainReport> {
    cfg.validate()?;
    if dataset.records.is_empty() {
        return Err(param("dataset", "must contain at least one scene"));
    }
    if dataset.header.image != init.arch.image {
        return Err(param("dataset", "image shape differs from the architecture"));
    }
    let images: Vec<Vec<f64>> = dataset.records.iter().map(|r| r.image_f64()).collect();
    let start = Instant::now();
    let mut trainer = Trainer::new(init, schedule.clone());
    let mut rng = stream(cfg.seed, "train", 0);
    let mut losses = Vec::with_capacity(cfg.step_budget);
    for step in 0..cfg.step_budget {
        let idx: Vec<usize> = (0..cfg.batch_size).map(|_| rng.random_range(0..images.len())).collect();
        let batch: Vec<Example> = idx.iter().map(|&i| (images[i].as_slice(), &dataset.records[i].concepts)).collect();
        let loss = trainer.train_step(&batch, cfg, &mut rng).map_err(|e| match e {
            Error::NonFiniteLoss { .. } => Error::NonFiniteLoss { step },
            other => other,
        })?;
        losses.push(loss);
        if cfg.checkpoint_every.is_some_and(|c| (step + 1) % c == 0) {
            on_checkpoint(step + 1, &trainer.params)?;
        }
    }
    if cfg.checkpoint_every.is_none_or(|c| cfg.step_budget % c != 0) {
        on_checkpoint(cfg.step_budget, &trainer.params)?;
    }
    Ok(TrainReport { losses, params: trainer.params, wall_clock_secs: start.elapsed().as_secs_f64(), steps: cfg.step_budget })
}
