//! Forward diffusion process: the linear β schedule and the closed-form
//! noising map x_t = √ᾱ_t·x0 + √(1−ᾱ_t)·ε.
//!
//! Timesteps are 1-based everywhere in the public API (t ∈ {1..T}); the
//! tables are stored 0-based and [`NoiseSchedule::index`] is the only place
//! the conversion happens.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, param, Result};

/// Settings that fully determine a schedule. This is what gets written to
/// configs and checkpoints; the tables are rebuilt on load.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    #[serde(rename = "T")]
    pub step_count: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { step_count: 1000, beta_start: 1e-4, beta_end: 2e-2 }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.step_count, self.beta_start, self.beta_end)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    config: ScheduleConfig,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Betas interpolated linearly from `beta_start` to `beta_end` inclusive.
    pub fn linear(step_count: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if step_count < 1 {
            return Err(param("step_count", "must be at least 1"));
        }
        if !(beta_start > 0.0 && beta_start < 1.0) {
            return Err(param("beta_start", format!("{beta_start} is outside (0, 1)")));
        }
        if !(beta_end < 1.0) {
            return Err(param("beta_end", format!("{beta_end} is not below 1")));
        }
        if !(beta_end >= beta_start) {
            return Err(param("beta_end", format!("{beta_end} is below beta_start {beta_start}")));
        }
        let betas: Vec<f64> = (0..step_count)
            .map(|i| {
                if step_count == 1 {
                    beta_start
                } else {
                    let f = i as f64 / (step_count - 1) as f64;
                    beta_start + f * (beta_end - beta_start)
                }
            })
            .collect();
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(step_count);
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        Ok(Self { config: ScheduleConfig { step_count, beta_start, beta_end }, betas, alphas, alpha_bars })
    }

    pub fn config(&self) -> ScheduleConfig {
        self.config
    }

    pub fn step_count(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    /// Storage index for a 1-based timestep.
    #[inline]
    pub fn index(&self, t: usize) -> usize {
        assert!(t >= 1 && t <= self.step_count(), "timestep {t} outside 1..={}", self.step_count());
        t - 1
    }

    pub fn check_timestep(&self, t: usize) -> Result<()> {
        if t >= 1 && t <= self.step_count() {
            Ok(())
        } else {
            Err(param("timestep", format!("{t} outside 1..={}", self.step_count())))
        }
    }

    #[inline]
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[self.index(t)]
    }

    /// Draws t ~ Unif{lo..=hi}.
    pub fn sample_timestep<R: Rng + ?Sized>(&self, rng: &mut R, range: TimeRange) -> usize {
        rng.random_range(range.lo..=range.hi)
    }

    /// The full range {1..T}.
    pub fn full_range(&self) -> TimeRange {
        TimeRange { lo: 1, hi: self.step_count() }
    }

    pub fn resolve_range(&self, range: Option<TimeRange>) -> Result<TimeRange> {
        match range {
            None => Ok(self.full_range()),
            Some(r) => {
                if r.lo < 1 || r.hi > self.step_count() || r.lo > r.hi {
                    Err(param("t_range", format!("[{}, {}] not within 1..={}", r.lo, r.hi, self.step_count())))
                } else {
                    Ok(r)
                }
            }
        }
    }
}

/// Inclusive 1-based timestep interval.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeRange {
    pub lo: usize,
    pub hi: usize,
}

/// One (ε, t) draw.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSample {
    pub epsilon: Vec<f64>,
    pub timestep: usize,
}

impl NoiseSample {
    pub fn draw<R: Rng + ?Sized>(rng: &mut R, len: usize, schedule: &NoiseSchedule, range: TimeRange) -> Self {
        // t first, then ε, so the sequence of draws is fixed per sample.
        let timestep = schedule.sample_timestep(rng, range);
        let epsilon = (0..len).map(|_| rng.sample(StandardNormal)).collect();
        Self { epsilon, timestep }
    }
}

/// x_t = √ᾱ_t·x0 + √(1−ᾱ_t)·ε, elementwise.
pub fn noise_image(x0: &[f64], sample: &NoiseSample, schedule: &NoiseSchedule) -> Result<Vec<f64>> {
    check_len(x0.len(), sample.epsilon.len())?;
    schedule.check_timestep(sample.timestep)?;
    let ab = schedule.alpha_bar(sample.timestep);
    let (sa, sv) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(x0.iter().zip(&sample.epsilon).map(|(x, e)| sa * x + sv * e).collect())
}
