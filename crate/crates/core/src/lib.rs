//! Compositional diffusion denoisers and inverse generative inference.
//!
//! A scene is explained as a set of concepts (object coordinates or binary
//! attribute labels). A single conditional denoiser is trained so that the
//! sum of its per-concept predictions denoises the scene, and inference
//! inverts it: the concept set whose composed prediction has the lowest
//! denoising error is taken as the scene description.

pub mod checkpoint;
pub mod concept;
mod container;
pub mod denoiser;
pub mod error;
pub mod eval;
pub mod infer;
pub mod rng;
pub mod schedule;
pub mod train;
pub mod world;

pub use concept::{ConceptKind, ConceptSet, ConceptVector};
pub use denoiser::{Architecture, Cond, DenoiserParams, Denoiser, GaussianOracle, ImageShape, Network};
pub use error::{Error, Result};
pub use schedule::{noise_image, NoiseSample, NoiseSchedule, ScheduleConfig, TimeRange};
