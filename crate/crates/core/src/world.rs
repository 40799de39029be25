//! Procedural blob world: scene specs, rendering, seeded datasets and their
//! on-disk format.
//!
//! Two tasks share the renderer. In the *local* task a scene is K blobs on a
//! flat background and its concepts are the blob centres. In the *global*
//! task a scene has one blob and three binary attributes (light background,
//! border frame, ring-shaped blob) whose levels come from a palette; palettes
//! A and B give an in-distribution and a shifted split.

use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::concept::{ConceptKind, ConceptSet};
use crate::container;
use crate::denoiser::ImageShape;
use crate::error::{param, Error, Result};
use crate::rng::stream;

pub const DATASET_MAGIC: [u8; 4] = *b"CDSD";
pub const DATASET_VERSION: u32 = 1;

/// Number of attributes the renderer knows how to draw.
pub const GLOBAL_ATTRIBUTES: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    Local,
    Global,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Profile {
    Disc,
    Ring,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Blob {
    pub cx: f64,
    pub cy: f64,
    pub radius: f64,
    pub profile: Profile,
}

/// Intensity levels for one visual style.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Palette {
    pub id: String,
    pub dark: f64,
    pub light: f64,
    pub border: f64,
    pub amplitude: f64,
    /// Per-channel multiplier; length must equal the channel count.
    pub tint: Vec<f64>,
}

impl Palette {
    pub fn local(channels: usize) -> Self {
        Self { id: "L".into(), dark: 0.2, light: 0.2, border: 0.0, amplitude: 0.6, tint: vec![1.0; channels] }
    }

    pub fn a(channels: usize) -> Self {
        Self { id: "A".into(), dark: 0.15, light: 0.45, border: 0.3, amplitude: 0.45, tint: vec![1.0; channels] }
    }

    pub fn b(channels: usize) -> Self {
        Self { id: "B".into(), dark: 0.22, light: 0.52, border: 0.25, amplitude: 0.4, tint: vec![1.0; channels] }
    }

    pub fn by_id(id: &str, channels: usize) -> Result<Self> {
        match id {
            "L" => Ok(Self::local(channels)),
            "A" => Ok(Self::a(channels)),
            "B" => Ok(Self::b(channels)),
            other => Err(param("palette", format!("unknown palette `{other}` (expected L, A or B)"))),
        }
    }
}

/// Everything needed to render one scene deterministically.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub image: ImageShape,
    pub objects: Vec<Blob>,
    /// Global attributes [light background, border, ring style]; empty for the local task.
    pub attributes: Vec<bool>,
    pub palette: Palette,
    pub margin: f64,
    /// Border thickness in pixels.
    pub border_width: usize,
    /// Inner-bump weight that hollows a ring.
    pub ring_depth: f64,
    pub texture_sigma: f64,
    /// Seed of the texture noise; `None` renders without texture.
    pub texture_seed: Option<u64>,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.image.is_empty() {
            return Err(param("image", "empty image"));
        }
        if self.palette.tint.len() != self.image.channels {
            return Err(param("palette", "tint length must equal the channel count"));
        }
        if !(self.texture_sigma >= 0.0) {
            return Err(param("texture_sigma", "must be non-negative"));
        }
        for b in &self.objects {
            let ok = |v: f64| v >= self.margin && v <= 1.0 - self.margin;
            if !ok(b.cx) || !ok(b.cy) {
                return Err(param(
                    "objects",
                    format!("centre ({}, {}) outside [{m}, {}]", b.cx, b.cy, 1.0 - self.margin, m = self.margin),
                ));
            }
            if !(b.radius > 0.0) {
                return Err(param("objects", "radius must be positive"));
            }
        }
        if self.attributes.len() > GLOBAL_ATTRIBUTES {
            return Err(param("attributes", format!("at most {GLOBAL_ATTRIBUTES} attributes are rendered")));
        }
        Ok(())
    }

    /// Ground-truth concepts: blob centres for the local task, attribute labels for the global one.
    pub fn concepts(&self, task: TaskKind) -> Result<ConceptSet> {
        match task {
            TaskKind::Local => ConceptSet::coordinates(&self.objects.iter().map(|b| (b.cx, b.cy)).collect::<Vec<_>>()),
            TaskKind::Global => ConceptSet::labels(&self.attributes),
        }
    }
}

fn profile_value(b: &Blob, u: f64, v: f64, ring_depth: f64) -> f64 {
    let sigma = b.radius / 2.0;
    let r2 = (u - b.cx).powi(2) + (v - b.cy).powi(2);
    let outer = (-r2 / (2.0 * sigma * sigma)).exp();
    match b.profile {
        Profile::Disc => outer,
        Profile::Ring => {
            let inner = sigma / 2.0;
            outer - ring_depth * (-r2 / (2.0 * inner * inner)).exp()
        }
    }
}

/// Background plus additive blobs (plus border and texture), clipped to [0, 1].
/// Layout is row-major with interleaved channels.
pub fn render_scene(spec: &SceneSpec) -> Result<Vec<f64>> {
    spec.validate()?;
    let ImageShape { height, width, channels } = spec.image;
    let pal = &spec.palette;
    let attr = |i: usize| spec.attributes.get(i).copied().unwrap_or(false);
    let level = if attr(0) { pal.light } else { pal.dark };
    let mut noise = spec.texture_seed.map(|s| stream(s, "texture", 0));
    let mut img = Vec::with_capacity(spec.image.len());
    let bw = spec.border_width;
    for (p, (u, v)) in spec.image.positions().into_iter().enumerate() {
        let (i, j) = (p / width, p % width);
        let mut val = level;
        if attr(1) && (i < bw || j < bw || i + bw >= height || j + bw >= width) {
            val += pal.border;
        }
        for b in &spec.objects {
            val += pal.amplitude * profile_value(b, u, v, spec.ring_depth);
        }
        for ch in 0..channels {
            let mut x = val * pal.tint[ch];
            if let Some(rng) = noise.as_mut() {
                x += spec.texture_sigma * rng.sample::<f64, _>(StandardNormal);
            }
            img.push(x.clamp(0.0, 1.0));
        }
    }
    Ok(img)
}

/// Scene-generation settings shared by every split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub margin: f64,
    pub min_separation: f64,
    /// Blob radius; the bump σ is half of it.
    pub radius: f64,
    pub texture_sigma: f64,
    pub border_width: usize,
    pub ring_depth: f64,
    /// Global-task blob centres are drawn from [global_center_lo, 1 − global_center_lo]².
    pub global_center_lo: f64,
    pub global_radius: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            height: 16,
            width: 16,
            channels: 1,
            margin: 0.1,
            min_separation: 0.15,
            radius: 0.16,
            texture_sigma: 0.05,
            border_width: 2,
            ring_depth: 0.9,
            global_center_lo: 0.5,
            global_radius: 0.3,
        }
    }
}

impl WorldConfig {
    pub fn image(&self) -> ImageShape {
        ImageShape::new(self.height, self.width, self.channels)
    }

    pub fn blob_sigma(&self) -> f64 {
        self.radius / 2.0
    }
}

/// Which slice of scene space a dataset covers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitDescriptor {
    pub name: String,
    pub palette: String,
    pub k_min: usize,
    pub k_max: usize,
}

impl SplitDescriptor {
    /// True when neither palettes nor K ranges overlap.
    pub fn disjoint_from(&self, other: &SplitDescriptor) -> bool {
        let k_overlap = self.k_min <= other.k_max && other.k_min <= self.k_max;
        self.palette != other.palette && !k_overlap
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetHeader {
    pub format_version: u32,
    pub image: ImageShape,
    pub task: TaskKind,
    pub concept_kind: ConceptKind,
    pub concept_dim: usize,
    pub split: SplitDescriptor,
    pub seed: u64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneRecord {
    /// Rendered image at storage precision.
    #[serde(skip)]
    pub image: Vec<f32>,
    pub concepts: ConceptSet,
    pub spec: SceneSpec,
}

impl SceneRecord {
    pub fn image_f64(&self) -> Vec<f64> {
        self.image.iter().map(|&v| v as f64).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneDataset {
    pub header: DatasetHeader,
    pub records: Vec<SceneRecord>,
}

fn sample_centers<R: Rng + ?Sized>(rng: &mut R, k: usize, cfg: &WorldConfig) -> Result<Vec<(f64, f64)>> {
    let (lo, hi) = (cfg.margin, 1.0 - cfg.margin);
    for _ in 0..100_000 {
        let pts: Vec<(f64, f64)> = (0..k).map(|_| (rng.random_range(lo..=hi), rng.random_range(lo..=hi))).collect();
        let ok = (0..k).all(|i| (0..i).all(|j| {
            let d = ((pts[i].0 - pts[j].0).powi(2) + (pts[i].1 - pts[j].1).powi(2)).sqrt();
            d >= cfg.min_separation
        }));
        if ok {
            return Ok(pts);
        }
    }
    Err(Error::Config(format!(
        "cannot place {k} centres with separation {} inside margin {}",
        cfg.min_separation, cfg.margin
    )))
}

/// Draw one scene spec for the given task from `rng`.
pub fn sample_spec<R: Rng + ?Sized>(
    rng: &mut R,
    task: TaskKind,
    k: usize,
    palette: &Palette,
    cfg: &WorldConfig,
    attributes: usize,
) -> Result<SceneSpec> {
    let (objects, bits) = match task {
        TaskKind::Local => {
            let pts = sample_centers(rng, k, cfg)?;
            let objs = pts.into_iter().map(|(cx, cy)| Blob { cx, cy, radius: cfg.radius, profile: Profile::Disc }).collect();
            (objs, vec![])
        }
        TaskKind::Global => {
            let bits: Vec<bool> = (0..attributes).map(|_| rng.random_bool(0.5)).collect();
            let lo = cfg.global_center_lo;
            let (cx, cy) = (rng.random_range(lo..=1.0 - lo), rng.random_range(lo..=1.0 - lo));
            let profile = if bits.get(2).copied().unwrap_or(false) { Profile::Ring } else { Profile::Disc };
            (vec![Blob { cx, cy, radius: cfg.global_radius, profile }], bits)
        }
    };
    Ok(SceneSpec {
        image: cfg.image(),
        objects,
        attributes: bits,
        palette: palette.clone(),
        margin: cfg.margin,
        border_width: cfg.border_width,
        ring_depth: cfg.ring_depth,
        texture_sigma: cfg.texture_sigma,
        texture_seed: if cfg.texture_sigma > 0.0 { Some(rng.random()) } else { None },
    })
}

pub fn make_record(spec: SceneSpec, task: TaskKind) -> Result<SceneRecord> {
    let image = render_scene(&spec)?.into_iter().map(|v| v as f32).collect();
    Ok(SceneRecord { image, concepts: spec.concepts(task)?, spec })
}

/// Seeded dataset of `count` scenes with K drawn uniformly from `k_range`
/// (the global task always has one blob and three attributes). Record i uses
/// its own derived stream, so records are independent of generation order.
pub fn sample_dataset(
    task: TaskKind,
    count: usize,
    k_range: (usize, usize),
    palette: &Palette,
    seed: u64,
    cfg: &WorldConfig,
    split_name: &str,
) -> Result<SceneDataset> {
    if count < 1 {
        return Err(param("count", "must be at least 1"));
    }
    let (k_min, k_max) = match task {
        TaskKind::Local => k_range,
        TaskKind::Global => (GLOBAL_ATTRIBUTES, GLOBAL_ATTRIBUTES),
    };
    if task == TaskKind::Local && (k_min < 1 || k_min > k_max) {
        return Err(param("k_range", format!("[{k_min}, {k_max}] is not a valid range with K ≥ 1")));
    }
    if palette.tint.len() != cfg.channels {
        return Err(param("palette", "tint length must equal the channel count"));
    }
    if task == TaskKind::Local {
        // Fail fast on infeasible packings instead of per record.
        sample_centers(&mut stream(seed, "feasibility", 0), k_max, cfg)?;
    }
    let records: Result<Vec<SceneRecord>> = (0..count)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream(seed, "scene", i as u64);
            let k = rng.random_range(k_min..=k_max);
            let spec = sample_spec(&mut rng, task, k, palette, cfg, GLOBAL_ATTRIBUTES)?;
            make_record(spec, task)
        })
        .collect();
    let records = records?;
    let (concept_kind, concept_dim) = match task {
        TaskKind::Local => (ConceptKind::Coordinate, 2),
        TaskKind::Global => (ConceptKind::OneHotLabel, GLOBAL_ATTRIBUTES + 2),
    };
    Ok(SceneDataset {
        header: DatasetHeader {
            format_version: DATASET_VERSION,
            image: cfg.image(),
            task,
            concept_kind,
            concept_dim,
            split: SplitDescriptor { name: split_name.into(), palette: palette.id.clone(), k_min, k_max },
            seed,
            count,
        },
        records,
    })
}

impl SceneDataset {
    pub fn validate(&self) -> Result<()> {
        if self.records.len() != self.header.count {
            return Err(param("records", format!("header says {} records, found {}", self.header.count, self.records.len())));
        }
        for r in &self.records {
            if r.image.len() != self.header.image.len() || r.spec.image != self.header.image {
                return Err(param("records", "record image shape differs from the header"));
            }
            if r.concepts.kind() != self.header.concept_kind || r.concepts.dim() != self.header.concept_dim {
                return Err(param("records", "record concepts do not match the header schema"));
            }
            if r.concepts != r.spec.concepts(self.header.task)? {
                return Err(param("records", "record concepts do not match their scene spec"));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        #[derive(Serialize)]
        struct Header<'a> {
            header: &'a DatasetHeader,
            records: &'a [SceneRecord],
        }
        let json = serde_json::to_vec(&Header { header: &self.header, records: &self.records })
            .map_err(|e| Error::Header { path: path.to_path_buf(), reason: e.to_string() })?;
        let payload = container::f32_bytes(self.records.iter().flat_map(|r| r.image.iter().copied()));
        container::write(path, DATASET_MAGIC, DATASET_VERSION, &json, &payload)
    }

    pub fn load(path: &Path) -> Result<Self> {
        #[derive(Deserialize)]
        struct Header {
            header: DatasetHeader,
            records: Vec<SceneRecord>,
        }
        let decoded = container::read(path, DATASET_MAGIC, DATASET_VERSION, "dataset")?;
        let bad = |reason: String| Error::Header { path: path.to_path_buf(), reason };
        let Header { header, mut records } = serde_json::from_slice(&decoded.header).map_err(|e| bad(e.to_string()))?;
        let values = container::f32_values(&decoded.payload, path)?;
        let n = header.image.len();
        if values.len() != n * records.len() {
            return Err(Error::Truncated {
                path: path.to_path_buf(),
                reason: format!("payload holds {} values, {} records need {}", values.len(), records.len(), n * records.len()),
            });
        }
        for (r, chunk) in records.iter_mut().zip(values.chunks_exact(n)) {
            r.image = chunk.to_vec();
        }
        let ds = SceneDataset { header, records };
        ds.validate().map_err(|e| bad(e.to_string()))?;
        Ok(ds)
    }

    /// Reads only the header (the payload is still checksummed).
    pub fn describe(path: &Path) -> Result<DatasetHeader> {
        Ok(Self::load(path)?.header)
    }
}
