//! Checkpoint files: architecture, schedule settings and f32 parameters in
//! the shared container format.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::container;
use crate::denoiser::{Architecture, DenoiserParams};
use crate::error::{Error, Result};
use crate::schedule::ScheduleConfig;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"CDCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub arch: Architecture,
    pub schedule: ScheduleConfig,
    pub param_count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: DenoiserParams,
    pub schedule: ScheduleConfig,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = CheckpointHeader {
            format_version: CHECKPOINT_VERSION,
            arch: self.params.arch.clone(),
            schedule: self.schedule,
            param_count: self.params.param_count(),
        };
        let json = serde_json::to_vec(&header).expect("checkpoint header serializes");
        container::encode(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, &json, &container::f32_bytes(self.params.values.iter().copied()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|source| Error::Io { path: path.to_path_buf(), source })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let d = container::read(path, CHECKPOINT_MAGIC, CHECKPOINT_VERSION, "checkpoint")?;
        let bad = |reason: String| Error::Header { path: path.to_path_buf(), reason };
        let header: CheckpointHeader = serde_json::from_slice(&d.header).map_err(|e| bad(e.to_string()))?;
        let values = container::f32_values(&d.payload, path)?;
        if values.len() != header.param_count || header.arch.param_count() != header.param_count {
            return Err(Error::Truncated {
                path: path.to_path_buf(),
                reason: format!("{} parameters stored, architecture needs {}", values.len(), header.arch.param_count()),
            });
        }
        let params = DenoiserParams { arch: header.arch, values };
        params.validate().map_err(|e| bad(e.to_string()))?;
        Ok(Self { params, schedule: header.schedule })
    }
}
