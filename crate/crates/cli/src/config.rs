//! Run configuration: one TOML file with a section per stage.
//!
//! Precedence is built-in defaults, then the file, then command-line flags.
//! Every command writes the fully resolved config next to its outputs.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use compdiff::eval::MissPenalty;
use compdiff::infer::InferenceConfig;
use compdiff::train::TrainConfig;
use compdiff::world::{Palette, TaskKind, WorldConfig, GLOBAL_ATTRIBUTES};
use compdiff::{Architecture, ScheduleConfig};
use serde::{Deserialize, Serialize};

/// Marks errors that come from the user's configuration.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Global seed. Dataset, initialisation, training and inference seeds
    /// are all derived from it, so section-level `seed` keys are overwritten.
    pub seed: u64,
    pub out: PathBuf,
    pub world: WorldConfig,
    pub data: DataConfig,
    pub schedule: ScheduleConfig,
    /// Derived from the task and world when absent.
    pub architecture: Option<Architecture>,
    pub train: TrainConfig,
    pub infer: InferenceConfig,
    pub predict: PredictConfig,
    pub eval: EvalConfig,
    pub sweep: SweepConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("run"),
            world: WorldConfig::default(),
            data: DataConfig::default(),
            schedule: ScheduleConfig::default(),
            architecture: None,
            train: TrainConfig::default(),
            infer: InferenceConfig::default(),
            predict: PredictConfig::default(),
            eval: EvalConfig::default(),
            sweep: SweepConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub task: TaskKind,
    pub train_count: usize,
    pub test_count: usize,
    pub train_k: [usize; 2],
    pub test_k: [usize; 2],
    pub train_palette: String,
    pub test_palette: String,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            task: TaskKind::Local,
            train_count: 256,
            test_count: 50,
            train_k: [1, 2],
            test_k: [1, 2],
            train_palette: "L".into(),
            test_palette: "L".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Coordinate search with the true object count.
    FixedK,
    /// Coordinate search over the count range in `[infer]`.
    Count,
    /// Exhaustive search over binary attributes.
    Enumerate,
    /// Gradient search over relaxed attribute labels.
    Relaxed,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PredictConfig {
    pub mode: Mode,
    /// Only the first `scenes` test scenes; all when absent.
    pub scenes: Option<usize>,
    /// Overlay upscaling factor.
    pub overlay_scale: usize,
    pub mark_truth: bool,
}

impl Default for PredictConfig {
    fn default() -> Self {
        Self { mode: Mode::FixedK, scenes: None, overlay_scale: 8, mark_truth: true }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub penalty: MissPenalty,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { penalty: MissPenalty::CornerSentinel }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub restarts: Vec<usize>,
    pub seeds: Vec<u64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self { restarts: vec![1, 5, 10, 20], seeds: vec![0] }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).map_err(|e| ConfigError(format!("{}: {e}", path.display())).into())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| -> Result<()> { Err(ConfigError(msg).into()) };
        let d = &self.data;
        if d.train_count < 1 || d.test_count < 1 {
            return bad("data.train_count and data.test_count must be at least 1".into());
        }
        for (name, k) in [("train_k", d.train_k), ("test_k", d.test_k)] {
            if k[0] < 1 || k[0] > k[1] {
                return bad(format!("data.{name} = {k:?} is not a range with 1 ≤ min ≤ max"));
            }
        }
        let local = self.data.task == TaskKind::Local;
        match (local, self.predict.mode) {
            (true, Mode::FixedK | Mode::Count) | (false, Mode::Enumerate | Mode::Relaxed) => {}
            (_, m) => return bad(format!("predict.mode = {m:?} does not apply to the {:?} task", self.data.task)),
        }
        if self.predict.overlay_scale < 1 {
            return bad("predict.overlay_scale must be at least 1".into());
        }
        if self.sweep.restarts.is_empty() || self.sweep.restarts.contains(&0) || self.sweep.seeds.is_empty() {
            return bad("sweep.restarts needs positive entries and sweep.seeds at least one seed".into());
        }
        self.schedule.build()?;
        self.train.validate()?;
        self.infer.validate()?;
        self.architecture().validate()?;
        Ok(())
    }

    pub fn architecture(&self) -> Architecture {
        if let Some(a) = &self.architecture {
            return a.clone();
        }
        let w = &self.world;
        let mut arch = match self.data.task {
            TaskKind::Local => Architecture::coordinate(w.height, w.width, w.blob_sigma(), w.texture_sigma),
            TaskKind::Global => Architecture::label(w.height, w.width, GLOBAL_ATTRIBUTES, w.texture_sigma),
        };
        arch.image = w.image();
        arch
    }

    pub fn palette(&self, id: &str) -> Result<Palette> {
        Ok(Palette::by_id(id, self.world.channels)?)
    }

    /// Writes `<out>/<command>.resolved.toml`.
    pub fn echo(&self, command: &str) -> Result<()> {
        std::fs::create_dir_all(&self.out).with_context(|| format!("creating {}", self.out.display()))?;
        let path = self.out.join(format!("{command}.resolved.toml"));
        let text = toml::to_string(self).context("serializing the resolved config")?;
        std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
    }
}

pub fn out_path(cfg: &RunConfig, given: Option<&Path>, default: &str) -> PathBuf {
    given.map(Path::to_path_buf).unwrap_or_else(|| cfg.out.join(default))
}

pub fn ensure_exists(path: &Path, what: &str) -> Result<()> {
    if !path.exists() {
        bail!(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("{what} {} does not exist; run the earlier pipeline stage or pass its path", path.display()),
        ));
    }
    Ok(())
}
