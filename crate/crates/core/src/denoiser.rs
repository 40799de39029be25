//! The conditional denoiser ε_θ(x_t, t | c), its composition over concept
//! sets, exact reverse-mode gradients, and a closed-form Gaussian oracle.
//!
//! Every composed prediction is a sum of per-term outputs. Besides the K
//! concept terms, a denoiser may carry an unconditional *base* term ε_θ(x_t|∅)
//! that models everything no concept accounts for (background, texture and
//! the identity part of the posterior mean). Concept terms then only carry
//! what their concept adds, which is what lets a model trained on a few
//! concepts be composed over more of them.
//!
//! The network is a per-pixel MLP over a 3×3 patch of x_t, the pixel
//! position (optionally with positional sinusoids), sinusoidal time features and concept features, with FiLM time
//! modulation and a linear skip path. Its output is preconditioned:
//!
//! ```text
//! ε_θ(x_t, t | c) = s(t) · (g(c)·x_t − √ᾱ_t · F_θ(x_t, t, c)),   s(t) = √v / (ᾱ_t σ² + v),  v = 1 − ᾱ_t
//! ```
//!
//! with g = 1 for the base term and 0 for concept terms, so that the exact
//! Gaussian posterior-mean denoiser is reachable with F equal to the clean
//! image mean.

use std::f64::consts::PI;

use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::concept::{ConceptSet, ConceptVector};
use crate::error::{check_finite, check_len, param, Error, Result};
use crate::schedule::NoiseSchedule;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl ImageShape {
    pub fn new(height: usize, width: usize, channels: usize) -> Self {
        Self { height, width, channels }
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Pixel-centre coordinates (u, v) in the unit square, row-major.
    pub fn positions(&self) -> Vec<(f64, f64)> {
        let mut out = Vec::with_capacity(self.pixels());
        for i in 0..self.height {
            for j in 0..self.width {
                out.push(((j as f64 + 0.5) / self.width as f64, (i as f64 + 0.5) / self.height as f64));
            }
        }
        out
    }
}

/// One summand of a composition.
#[derive(Debug, Clone, Copy)]
pub enum Cond<'a> {
    Base,
    Concept(&'a [f64]),
}

/// Anything that predicts noise as a sum of per-term outputs.
///
/// `context` holds the work shared by all terms at one (x_t, t); `forward`
/// evaluates a single term and returns a tape for `cond_vjp`.
pub trait Denoiser: Sync {
    type Ctx: Sync;
    type Tape: Send;

    fn shape(&self) -> ImageShape;
    fn schedule(&self) -> &NoiseSchedule;
    fn concept_dim(&self) -> usize;
    /// Whether scene-level compositions include the unconditional base term.
    fn uses_base(&self) -> bool;
    fn context(&self, xt: &[f64], t: usize) -> Self::Ctx;
    fn forward(&self, ctx: &Self::Ctx, cond: Cond) -> (Vec<f64>, Self::Tape);
    /// Gradient of ⟨upstream, term(cond)⟩ with respect to the concept values.
    fn cond_vjp(&self, ctx: &Self::Ctx, cond: &[f64], tape: &Self::Tape, upstream: &[f64]) -> Vec<f64>;
}

/// Output-preconditioning scale s(t) = √v / (ᾱσ² + v).
pub fn precond_scale(alpha_bar: f64, sigma: f64) -> f64 {
    let v = 1.0 - alpha_bar;
    v.sqrt() / (alpha_bar * sigma * sigma + v)
}

// ---------------------------------------------------------------------------
// Architecture and parameters

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Encoding {
    /// (cx, cy) concepts; features are scaled offsets and Gaussian bumps of
    /// the given widths around the concept position.
    Coordinate { widths: Vec<f64>, offset_scale: f64 },
    /// Attribute/label one-hot concepts over `attributes` binary attributes.
    Label { attributes: usize },
}

impl Encoding {
    pub fn concept_dim(&self) -> usize {
        match self {
            Encoding::Coordinate { .. } => 2,
            Encoding::Label { attributes } => attributes + 2,
        }
    }

    /// Per-pixel feature width (the trailing entry is the concept flag).
    pub fn feature_dim(&self) -> usize {
        match self {
            Encoding::Coordinate { widths, .. } => 2 + widths.len() + 1,
            Encoding::Label { attributes } => attributes + 2 + 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub image: ImageShape,
    pub hidden: usize,
    pub time_dim: usize,
    pub encoding: Encoding,
    /// σ used in the output preconditioning; matches the data's texture noise.
    pub data_sigma: f64,
    /// F: adds sin/cos(kπu), sin/cos(kπv) for k = 1..F to the pixel input.
    #[serde(default)]
    pub position_frequencies: usize,
}

/// Named parameter blocks, in storage order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Block {
    Wx,
    Bx,
    Wt,
    Wc,
    Wf,
    Bf,
    W2,
    B2,
    Wo,
    Bo,
    Ws,
}

impl Block {
    pub const ALL: [Block; 11] =
        [Block::Wx, Block::Bx, Block::Wt, Block::Wc, Block::Wf, Block::Bf, Block::W2, Block::B2, Block::Wo, Block::Bo, Block::Ws];
}

impl Architecture {
    /// Coordinate-task defaults for a grayscale image of the given size.
    pub fn coordinate(height: usize, width: usize, blob_sigma: f64, data_sigma: f64) -> Self {
        Self {
            image: ImageShape::new(height, width, 1),
            hidden: 32,
            time_dim: 16,
            encoding: Encoding::Coordinate {
                widths: vec![0.5 * blob_sigma, blob_sigma, 2.0 * blob_sigma],
                offset_scale: 5.0,
            },
            data_sigma,
            position_frequencies: 0,
        }
    }

    pub fn label(height: usize, width: usize, attributes: usize, data_sigma: f64) -> Self {
        Self {
            image: ImageShape::new(height, width, 1),
            hidden: 32,
            time_dim: 16,
            encoding: Encoding::Label { attributes },
            data_sigma,
            // Labels carry no position, so the network needs its own
            // positional basis to draw location-dependent attributes.
            position_frequencies: 4,
        }
    }

    /// Width of the shared per-pixel input: 3×3×C patch, (u, v) and the
    /// positional sinusoids.
    pub fn input_dim(&self) -> usize {
        9 * self.image.channels + 2 + 4 * self.position_frequencies
    }

    pub fn block_shape(&self, b: Block) -> (usize, usize) {
        let (h, e, c) = (self.hidden, self.time_dim, self.image.channels);
        let (dx, f) = (self.input_dim(), self.encoding.feature_dim());
        match b {
            Block::Wx => (h, dx),
            Block::Bx => (h, 1),
            Block::Wt => (h, e),
            Block::Wc => (h, f),
            Block::Wf => (2 * h, e),
            Block::Bf => (2 * h, 1),
            Block::W2 => (h, h),
            Block::B2 => (h, 1),
            Block::Wo => (c, h),
            Block::Bo => (c, 1),
            Block::Ws => (c, dx + f),
        }
    }

    pub fn block_range(&self, b: Block) -> std::ops::Range<usize> {
        let mut start = 0;
        for other in Block::ALL {
            let (r, c) = self.block_shape(other);
            if other == b {
                return start..start + r * c;
            }
            start += r * c;
        }
        unreachable!()
    }

    pub fn param_count(&self) -> usize {
        Block::ALL.iter().map(|&b| self.block_shape(b)).map(|(r, c)| r * c).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.image.is_empty() {
            return Err(param("image", "height, width and channels must be positive"));
        }
        if self.hidden == 0 {
            return Err(param("hidden", "must be positive"));
        }
        if self.time_dim == 0 || self.time_dim % 2 != 0 {
            return Err(param("time_dim", "must be a positive even number"));
        }
        if !(self.data_sigma >= 0.0 && self.data_sigma.is_finite()) {
            return Err(param("data_sigma", "must be finite and non-negative"));
        }
        match &self.encoding {
            Encoding::Coordinate { widths, offset_scale } => {
                if widths.is_empty() || widths.iter().any(|w| !(*w > 0.0)) || !offset_scale.is_finite() {
                    return Err(param("encoding", "coordinate widths must be positive"));
                }
            }
            Encoding::Label { attributes } => {
                if *attributes == 0 {
                    return Err(param("encoding", "need at least one attribute"));
                }
            }
        }
        Ok(())
    }
}

/// Network parameters θ. Values are stored as f32 (the checkpoint precision)
/// and widened to f64 for arithmetic.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserParams {
    pub arch: Architecture,
    pub values: Vec<f32>,
}

impl DenoiserParams {
    pub fn zeros(arch: Architecture) -> Result<Self> {
        arch.validate()?;
        let n = arch.param_count();
        Ok(Self { arch, values: vec![0.0; n] })
    }

    /// Weights ~ N(0, 1/fan_in), biases zero.
    pub fn init<R: Rng + ?Sized>(arch: Architecture, rng: &mut R) -> Result<Self> {
        let mut p = Self::zeros(arch)?;
        for b in Block::ALL {
            if matches!(b, Block::Bx | Block::Bf | Block::B2 | Block::Bo) {
                continue;
            }
            let (_, fan_in) = p.arch.block_shape(b);
            let std = 1.0 / (fan_in as f64).sqrt();
            let range = p.arch.block_range(b);
            for v in &mut p.values[range] {
                let z: f64 = rng.sample(StandardNormal);
                *v = (z * std) as f32;
            }
        }
        Ok(p)
    }

    pub fn param_count(&self) -> usize {
        self.values.len()
    }

    pub fn block(&self, b: Block) -> &[f32] {
        &self.values[self.arch.block_range(b)]
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        check_len(self.arch.param_count(), self.values.len())?;
        if self.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric { context: "denoiser parameters".into() });
        }
        Ok(())
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.values.iter().map(|&v| v as f64).collect()
    }
}

// ---------------------------------------------------------------------------
// Network

/// An evaluable network: f64 copies of the parameters plus precomputed
/// per-pixel constants.
#[derive(Debug, Clone)]
pub struct Network {
    arch: Architecture,
    schedule: NoiseSchedule,
    wx: Array2<f64>,
    bx: Array1<f64>,
    wt: Array2<f64>,
    wc: Array2<f64>,
    wf: Array2<f64>,
    bf: Array1<f64>,
    w2: Array2<f64>,
    b2: Array1<f64>,
    wo: Array2<f64>,
    bo: Array1<f64>,
    ws: Array2<f64>,
    positions: Vec<(f64, f64)>,
}

/// Work shared by every term at one (x_t, t).
#[derive(Debug, Clone)]
pub struct NetCtx {
    t: usize,
    temb: Array1<f64>,
    inp: Array2<f64>,
    /// inp·Wxᵀ + bx + Wt·temb
    pre: Array2<f64>,
    gamma: Array1<f64>,
    beta: Array1<f64>,
    /// inp-part of the skip path, P×C
    skip: Array2<f64>,
    xt: Array2<f64>,
    scale: f64,
    sqrt_ab: f64,
}

#[derive(Debug, Clone)]
pub struct NetTape {
    feats: Array2<f64>,
    /// SiLU derivatives at z1 and z2, kept so the backward pass needs no exp.
    d1: Array2<f64>,
    h1: Array2<f64>,
    m: Array2<f64>,
    d2: Array2<f64>,
    h2: Array2<f64>,
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// SiLU values and derivatives of `z`, in one exp per entry.
fn silu_pair(z: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
    let s = z.mapv(sigmoid);
    let h = z * &s;
    let d = Zip::from(&s).and(z).map_collect(|&s, &z| s * (1.0 + z * (1.0 - s)));
    (h, d)
}

/// Sinusoidal features of t/T: [sin(a_i), cos(a_i)] with a_i = (t/T)·1000·1000^(−i/half).
pub fn time_embedding(t: usize, step_count: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let x = t as f64 / step_count as f64;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(1000f64.ln()) * i as f64 / half as f64).exp();
        let a = x * freq * 1000.0;
        out[i] = a.sin();
        out[half + i] = a.cos();
    }
    out
}

fn block_matrix(arch: &Architecture, theta: &[f64], b: Block) -> Array2<f64> {
    let (r, c) = arch.block_shape(b);
    Array2::from_shape_vec((r, c), theta[arch.block_range(b)].to_vec()).expect("block shape")
}

fn block_vector(arch: &Architecture, theta: &[f64], b: Block) -> Array1<f64> {
    Array1::from(theta[arch.block_range(b)].to_vec())
}

impl Network {
    pub fn new(params: &DenoiserParams, schedule: &NoiseSchedule) -> Result<Self> {
        params.validate()?;
        Self::with_f64_values(&params.arch, &params.to_f64(), schedule)
    }

    /// Build from an f64 parameter vector in storage order. Used for
    /// finite-difference checks, where f32 rounding would swamp the step.
    pub fn with_f64_values(arch: &Architecture, theta: &[f64], schedule: &NoiseSchedule) -> Result<Self> {
        arch.validate()?;
        check_len(arch.param_count(), theta.len())?;
        check_finite(theta, "denoiser parameters")?;
        Ok(Self {
            arch: arch.clone(),
            schedule: schedule.clone(),
            wx: block_matrix(arch, theta, Block::Wx),
            bx: block_vector(arch, theta, Block::Bx),
            wt: block_matrix(arch, theta, Block::Wt),
            wc: block_matrix(arch, theta, Block::Wc),
            wf: block_matrix(arch, theta, Block::Wf),
            bf: block_vector(arch, theta, Block::Bf),
            w2: block_matrix(arch, theta, Block::W2),
            b2: block_vector(arch, theta, Block::B2),
            wo: block_matrix(arch, theta, Block::Wo),
            bo: block_vector(arch, theta, Block::Bo),
            ws: block_matrix(arch, theta, Block::Ws),
            positions: arch.image.positions(),
        })
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    fn inputs(&self, xt: &[f64]) -> Array2<f64> {
        let ImageShape { height: h, width: w, channels: c } = self.arch.image;
        let dx = self.arch.input_dim();
        let mut inp = Array2::zeros((h * w, dx));
        for i in 0..h {
            for j in 0..w {
                let p = i * w + j;
                let mut k = 0;
                for di in -1i64..=1 {
                    for dj in -1i64..=1 {
                        let (ii, jj) = (i as i64 + di, j as i64 + dj);
                        let inside = ii >= 0 && jj >= 0 && (ii as usize) < h && (jj as usize) < w;
                        for ch in 0..c {
                            if inside {
                                inp[[p, k]] = xt[(ii as usize * w + jj as usize) * c + ch];
                            }
                            k += 1;
                        }
                    }
                }
                let (u, v) = self.positions[p];
                inp[[p, k]] = u;
                inp[[p, k + 1]] = v;
                k += 2;
                for f in 1..=self.arch.position_frequencies {
                    let (a, b) = (f as f64 * PI * u, f as f64 * PI * v);
                    inp.slice_mut(s![p, k..k + 4]).assign(&ndarray::arr1(&[a.sin(), a.cos(), b.sin(), b.cos()]));
                    k += 4;
                }
            }
        }
        inp
    }

    /// Per-pixel concept features (zeros for the base term).
    fn features(&self, cond: Cond) -> Array2<f64> {
        let f = self.arch.encoding.feature_dim();
        let mut out = Array2::zeros((self.arch.image.pixels(), f));
        let values = match cond {
            Cond::Base => return out,
            Cond::Concept(v) => v,
        };
        match &self.arch.encoding {
            Encoding::Coordinate { widths, offset_scale } => {
                let (cx, cy) = (values[0], values[1]);
                for (p, &(u, v)) in self.positions.iter().enumerate() {
                    let (dx, dy) = (u - cx, v - cy);
                    let r2 = dx * dx + dy * dy;
                    out[[p, 0]] = offset_scale * dx;
                    out[[p, 1]] = offset_scale * dy;
                    for (j, w) in widths.iter().enumerate() {
                        out[[p, 2 + j]] = (-r2 / (2.0 * w * w)).exp();
                    }
                    out[[p, f - 1]] = 1.0;
                }
            }
            Encoding::Label { .. } => {
                for mut row in out.rows_mut() {
                    for (k, &v) in values.iter().enumerate() {
                        row[k] = v;
                    }
                    row[f - 1] = 1.0;
                }
            }
        }
        out
    }

    fn features_vjp(&self, cond: &[f64], feats: &Array2<f64>, dfeats: &Array2<f64>) -> Vec<f64> {
        match &self.arch.encoding {
            Encoding::Coordinate { widths, offset_scale } => {
                let (cx, cy) = (cond[0], cond[1]);
                let (mut gx, mut gy) = (0.0, 0.0);
                for (p, &(u, v)) in self.positions.iter().enumerate() {
                    let (dx, dy) = (u - cx, v - cy);
                    gx -= offset_scale * dfeats[[p, 0]];
                    gy -= offset_scale * dfeats[[p, 1]];
                    for (j, w) in widths.iter().enumerate() {
                        let k = dfeats[[p, 2 + j]] * feats[[p, 2 + j]] / (w * w);
                        gx += k * dx;
                        gy += k * dy;
                    }
                }
                vec![gx, gy]
            }
            Encoding::Label { .. } => {
                let sums = dfeats.sum_axis(Axis(0));
                sums.iter().take(cond.len()).copied().collect()
            }
        }
    }

    /// Gate g(c): 1 for the base term, 0 for concept terms.
    fn gate(cond: Cond) -> f64 {
        match cond {
            Cond::Base => 1.0,
            Cond::Concept(_) => 0.0,
        }
    }

    /// F_θ output before preconditioning, P×C.
    fn inner(&self, ctx: &NetCtx, feats: &Array2<f64>, h2: &Array2<f64>) -> Array2<f64> {
        let dx = self.arch.input_dim();
        let ws_f = self.ws.slice(s![.., dx..]);
        let mut out = h2.dot(&self.wo.t()) + &ctx.skip + feats.dot(&ws_f.t());
        out += &self.bo;
        out
    }

    /// Backward through one term. `dout` is dL/d(term output), P×C. Returns
    /// dL/d(features) and, when `grads` is given, accumulates parameter
    /// gradients into it.
    fn backward(
        &self,
        ctx: &NetCtx,
        tape: &NetTape,
        dout: ArrayView2<f64>,
        grads: Option<&mut [f64]>,
    ) -> Array2<f64> {
        let dx = self.arch.input_dim();
        let h = self.arch.hidden;
        // o = s·(g·x − √ᾱ·F)  ⇒  dF = −s·√ᾱ·dout
        let d_f = dout.mapv(|u| -ctx.scale * ctx.sqrt_ab * u);
        let dh2 = d_f.dot(&self.wo);
        let mut dz2 = dh2;
        dz2 *= &tape.d2;
        let dm = dz2.dot(&self.w2);
        let mut dz1 = dm.clone();
        for mut row in dz1.rows_mut() {
            for (d, g) in row.iter_mut().zip(ctx.gamma.iter()) {
                *d *= 1.0 + g;
            }
        }
        dz1 *= &tape.d1;
        let ws_f = self.ws.slice(s![.., dx..]);
        let dfeats = dz1.dot(&self.wc) + d_f.dot(&ws_f);

        if let Some(g) = grads {
            let arch = &self.arch;
            let mut add = |b: Block, m: Array2<f64>| {
                let range = arch.block_range(b);
                for (dst, src) in g[range].iter_mut().zip(m.iter()) {
                    *dst += src;
                }
            };
            let col = |m: &Array2<f64>| m.sum_axis(Axis(0)).insert_axis(Axis(1));
            let te = ctx.temb.view().insert_axis(Axis(0));
            let dz1_sum = dz1.sum_axis(Axis(0));
            add(Block::Wx, dz1.t().dot(&ctx.inp));
            add(Block::Bx, col(&dz1));
            add(Block::Wt, dz1_sum.view().insert_axis(Axis(1)).dot(&te));
            add(Block::Wc, dz1.t().dot(&tape.feats));
            // m = h1·(1+γ) + β
            let dgamma = (&dm * &tape.h1).sum_axis(Axis(0));
            let dbeta = dm.sum_axis(Axis(0));
            let mut dgb = Array1::zeros(2 * h);
            dgb.slice_mut(s![..h]).assign(&dgamma);
            dgb.slice_mut(s![h..]).assign(&dbeta);
            add(Block::Wf, dgb.view().insert_axis(Axis(1)).dot(&te));
            add(Block::Bf, dgb.insert_axis(Axis(1)));
            add(Block::W2, dz2.t().dot(&tape.m));
            add(Block::B2, col(&dz2));
            add(Block::Wo, d_f.t().dot(&tape.h2));
            add(Block::Bo, col(&d_f));
            let mut dws = Array2::zeros(arch.block_shape(Block::Ws));
            dws.slice_mut(s![.., ..dx]).assign(&d_f.t().dot(&ctx.inp));
            dws.slice_mut(s![.., dx..]).assign(&d_f.t().dot(&tape.feats));
            add(Block::Ws, dws);
        }
        dfeats
    }

    /// Single-term prediction ε_θ(x_t, t | c) with input checks.
    pub fn denoise(&self, xt: &[f64], t: usize, c: &ConceptVector) -> Result<Vec<f64>> {
        self.check_inputs(xt, t)?;
        check_len(self.concept_dim(), c.dim())?;
        check_finite(&c.values, "concept")?;
        let ctx = self.context(xt, t);
        Ok(self.forward(&ctx, Cond::Concept(&c.values)).0)
    }

    /// The unconditional base term ε_θ(x_t, t | ∅).
    pub fn denoise_base(&self, xt: &[f64], t: usize) -> Result<Vec<f64>> {
        self.check_inputs(xt, t)?;
        let ctx = self.context(xt, t);
        Ok(self.forward(&ctx, Cond::Base).0)
    }

    fn check_inputs(&self, xt: &[f64], t: usize) -> Result<()> {
        check_len(self.arch.image.len(), xt.len())?;
        check_finite(xt, "x_t")?;
        self.schedule.check_timestep(t)
    }

    /// Composed squared residual ‖target − Σ terms‖² and its gradient with
    /// respect to every parameter, accumulated into `grads` (scaled by
    /// `weight`). Returns the unscaled loss.
    pub fn accumulate_param_grads(
        &self,
        xt: &[f64],
        t: usize,
        conds: &[Cond],
        target: &[f64],
        weight: f64,
        grads: &mut [f64],
    ) -> f64 {
        let ctx = self.context(xt, t);
        let terms: Vec<(Vec<f64>, NetTape)> = conds.iter().map(|&c| self.forward(&ctx, c)).collect();
        let mut sum = vec![0.0; target.len()];
        for (out, _) in &terms {
            for (s, o) in sum.iter_mut().zip(out) {
                *s += o;
            }
        }
        let resid: Vec<f64> = target.iter().zip(&sum).map(|(e, s)| e - s).collect();
        let loss: f64 = resid.iter().map(|r| r * r).sum();
        let up: Vec<f64> = resid.iter().map(|r| -2.0 * weight * r).collect();
        let shape = (self.arch.image.pixels(), self.arch.image.channels);
        let up = ArrayView2::from_shape(shape, &up).expect("image shape");
        for (_, tape) in &terms {
            self.backward(&ctx, tape, up, Some(grads));
        }
        loss
    }
}

impl Denoiser for Network {
    type Ctx = NetCtx;
    type Tape = NetTape;

    fn shape(&self) -> ImageShape {
        self.arch.image
    }

    fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn concept_dim(&self) -> usize {
        self.arch.encoding.concept_dim()
    }

    fn uses_base(&self) -> bool {
        true
    }

    fn context(&self, xt: &[f64], t: usize) -> NetCtx {
        let h = self.arch.hidden;
        let dx = self.arch.input_dim();
        let temb = Array1::from(time_embedding(t, self.schedule.step_count(), self.arch.time_dim));
        let inp = self.inputs(xt);
        let tvec = self.wt.dot(&temb) + &self.bx;
        let mut pre = inp.dot(&self.wx.t());
        pre += &tvec;
        let gb = self.wf.dot(&temb) + &self.bf;
        let skip = inp.dot(&self.ws.slice(s![.., ..dx]).t());
        let shape = (self.arch.image.pixels(), self.arch.image.channels);
        let ab = self.schedule.alpha_bar(t);
        NetCtx {
            t,
            temb,
            inp,
            pre,
            gamma: gb.slice(s![..h]).to_owned(),
            beta: gb.slice(s![h..]).to_owned(),
            skip,
            xt: Array2::from_shape_vec(shape, xt.to_vec()).expect("image shape"),
            scale: precond_scale(ab, self.arch.data_sigma),
            sqrt_ab: ab.sqrt(),
        }
    }

    fn forward(&self, ctx: &NetCtx, cond: Cond) -> (Vec<f64>, NetTape) {
        let feats = self.features(cond);
        let z1 = &ctx.pre + &feats.dot(&self.wc.t());
        let (h1, d1) = silu_pair(&z1);
        let mut m = h1.clone();
        for mut row in m.rows_mut() {
            for ((v, g), b) in row.iter_mut().zip(ctx.gamma.iter()).zip(ctx.beta.iter()) {
                *v = *v * (1.0 + g) + b;
            }
        }
        let mut z2 = m.dot(&self.w2.t());
        z2 += &self.b2;
        let (h2, d2) = silu_pair(&z2);
        let f = self.inner(ctx, &feats, &h2);
        let g = Self::gate(cond);
        let out: Vec<f64> = f
            .iter()
            .zip(ctx.xt.iter())
            .map(|(&fv, &x)| ctx.scale * (g * x - ctx.sqrt_ab * fv))
            .collect();
        (out, NetTape { feats, d1, h1, m, d2, h2 })
    }

    fn cond_vjp(&self, ctx: &NetCtx, cond: &[f64], tape: &NetTape, upstream: &[f64]) -> Vec<f64> {
        let shape = (self.arch.image.pixels(), self.arch.image.channels);
        let up = ArrayView2::from_shape(shape, upstream).expect("image shape");
        let dfeats = self.backward(ctx, tape, up, None);
        self.features_vjp(cond, &tape.feats, &dfeats)
    }
}

impl NetCtx {
    pub fn timestep(&self) -> usize {
        self.t
    }
}

// ---------------------------------------------------------------------------
// Composition

/// Σ_k w_k·term(c_k) (+ base term when `base`), at a prepared context.
pub fn compose<D: Denoiser>(d: &D, ctx: &D::Ctx, base: bool, concepts: &[&[f64]], weights: Option<&[f64]>) -> Vec<f64> {
    let mut out = if base { d.forward(ctx, Cond::Base).0 } else { vec![0.0; d.shape().len()] };
    for (k, c) in concepts.iter().enumerate() {
        let (o, _) = d.forward(ctx, Cond::Concept(c));
        let w = weights.map_or(1.0, |w| w[k]);
        for (acc, v) in out.iter_mut().zip(&o) {
            *acc += w * v;
        }
    }
    out
}

/// Squared residual of a composition and its gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualGrad {
    /// ‖target − composition‖²
    pub loss: f64,
    /// ∂loss/∂c^k per concept.
    pub concepts: Vec<Vec<f64>>,
    /// ∂loss/∂w^k per concept (meaningful for weighted compositions).
    pub weights: Vec<f64>,
}

pub fn residual_grad<D: Denoiser>(
    d: &D,
    ctx: &D::Ctx,
    base: bool,
    concepts: &[&[f64]],
    weights: Option<&[f64]>,
    target: &[f64],
) -> ResidualGrad {
    let base_out = base.then(|| d.forward(ctx, Cond::Base).0);
    residual_grad_with(d, ctx, base_out.as_deref(), concepts, weights, target)
}

/// As [`residual_grad`] with the base-term output supplied by the caller
/// (it does not depend on the concepts, so searches compute it once per draw).
pub fn residual_grad_with<D: Denoiser>(
    d: &D,
    ctx: &D::Ctx,
    base_out: Option<&[f64]>,
    concepts: &[&[f64]],
    weights: Option<&[f64]>,
    target: &[f64],
) -> ResidualGrad {
    // Sum first, then subtract, so the residual matches `compose` bitwise.
    let mut sum = base_out.map_or_else(|| vec![0.0; target.len()], |b| b.to_vec());
    let mut terms = Vec::with_capacity(concepts.len());
    for (k, c) in concepts.iter().enumerate() {
        let (o, tape) = d.forward(ctx, Cond::Concept(c));
        let w = weights.map_or(1.0, |w| w[k]);
        for (s, v) in sum.iter_mut().zip(&o) {
            *s += w * v;
        }
        terms.push((o, tape));
    }
    let resid: Vec<f64> = target.iter().zip(&sum).map(|(e, s)| e - s).collect();
    let loss = resid.iter().map(|r| r * r).sum();
    let up: Vec<f64> = resid.iter().map(|r| -2.0 * r).collect();
    let mut cgrads = Vec::with_capacity(concepts.len());
    let mut wgrads = Vec::with_capacity(concepts.len());
    for (k, (o, tape)) in terms.iter().enumerate() {
        let w = weights.map_or(1.0, |w| w[k]);
        let scaled: Vec<f64> = up.iter().map(|u| w * u).collect();
        cgrads.push(d.cond_vjp(ctx, concepts[k], tape, &scaled));
        wgrads.push(up.iter().zip(o).map(|(u, v)| u * v).sum());
    }
    ResidualGrad { loss, concepts: cgrads, weights: wgrads }
}

fn set_values(set: &ConceptSet) -> Vec<&[f64]> {
    set.concepts.iter().map(|c| c.values.as_slice()).collect()
}

fn check_set<D: Denoiser>(d: &D, xt: &[f64], t: usize, set: &ConceptSet) -> Result<()> {
    if set.is_empty() {
        return Err(param("concepts", "a concept set needs K ≥ 1 members"));
    }
    check_len(d.shape().len(), xt.len())?;
    check_finite(xt, "x_t")?;
    d.schedule().check_timestep(t)?;
    for c in &set.concepts {
        check_len(d.concept_dim(), c.dim())?;
        check_finite(&c.values, "concept")?;
    }
    Ok(())
}

/// Σ_k ε(x_t, t | c^k) over exactly the members of `set`.
pub fn composed_denoise<D: Denoiser>(d: &D, xt: &[f64], t: usize, set: &ConceptSet) -> Result<Vec<f64>> {
    check_set(d, xt, t, set)?;
    let ctx = d.context(xt, t);
    Ok(compose(d, &ctx, false, &set_values(set), None))
}

/// Scene-level prediction: the base term (if the denoiser has one) plus the
/// composition over `set`. This is the form inference scores against.
pub fn scene_denoise<D: Denoiser>(d: &D, xt: &[f64], t: usize, set: &ConceptSet) -> Result<Vec<f64>> {
    check_set(d, xt, t, set)?;
    let ctx = d.context(xt, t);
    Ok(compose(d, &ctx, d.uses_base(), &set_values(set), None))
}

/// ∂/∂c^k ‖target − Σ_k ε(x_t, t | c^k)‖² for every member of `set`.
pub fn grad_concepts<D: Denoiser>(d: &D, xt: &[f64], t: usize, set: &ConceptSet, target: &[f64]) -> Result<Vec<Vec<f64>>> {
    check_set(d, xt, t, set)?;
    check_len(xt.len(), target.len())?;
    let ctx = d.context(xt, t);
    Ok(residual_grad(d, &ctx, false, &set_values(set), None, target).concepts)
}

/// ∂/∂θ ‖target − Σ_k ε_θ(x_t, t | c^k)‖² over the members of `set`
/// (plus the base term when `with_base`).
pub fn grad_params(
    net: &Network,
    xt: &[f64],
    t: usize,
    set: &ConceptSet,
    with_base: bool,
    target: &[f64],
) -> Result<Vec<f64>> {
    check_set(net, xt, t, set)?;
    check_len(xt.len(), target.len())?;
    let mut conds: Vec<Cond> = Vec::with_capacity(set.len() + 1);
    if with_base {
        conds.push(Cond::Base);
    }
    conds.extend(set.concepts.iter().map(|c| Cond::Concept(&c.values)));
    let mut grads = vec![0.0; net.arch.param_count()];
    net.accumulate_param_grads(xt, t, &conds, target, 1.0, &mut grads);
    Ok(grads)
}

// ---------------------------------------------------------------------------
// Analytic oracle

/// E[ε | x_t] for x0 ~ N(mu, σ0²·I): √v·(x_t − √ᾱ·mu) / (ᾱσ0² + v).
pub fn analytic_gaussian_denoiser(
    mu: &[f64],
    sigma0: f64,
    xt: &[f64],
    t: usize,
    schedule: &NoiseSchedule,
) -> Result<Vec<f64>> {
    check_len(mu.len(), xt.len())?;
    schedule.check_timestep(t)?;
    if !(sigma0 >= 0.0) {
        return Err(param("sigma0", "must be non-negative"));
    }
    let ab = schedule.alpha_bar(t);
    let v = 1.0 - ab;
    let sa = ab.sqrt();
    let den = ab * sigma0 * sigma0 + v;
    let k = v.sqrt() / den;
    Ok(xt.iter().zip(mu).map(|(x, m)| k * (x - sa * m)).collect())
}

/// How a concept maps to its contribution m(c) to the clean-image mean.
#[derive(Debug, Clone, PartialEq)]
pub enum OracleMean {
    /// amplitude · exp(−|p − c|² / 2σ²) at every pixel p.
    Bump { amplitude: f64, sigma: f64 },
    /// Per attribute a, a template for label 1 and for label 0; a label
    /// concept contributes Σ_a c_a·(l·T_a1 + (1−l)·T_a0).
    Templates { templates: Vec<[Vec<f64>; 2]> },
}

/// Closed-form denoiser for the additive Gaussian scene model
/// x0 ~ N(background + Σ_k m(c^k), σ0²·I).
///
/// With `base` set, the base term carries √v·(x_t − √ᾱ·background)/den and
/// each concept term −√v·√ᾱ·m(c)/den, so any composition with a base term is
/// the exact posterior-mean denoiser for its concepts. Without it, a single
/// concept term is the exact denoiser for N(background + m(c), σ0²·I).
#[derive(Debug, Clone)]
pub struct GaussianOracle {
    pub schedule: NoiseSchedule,
    pub image: ImageShape,
    pub sigma0: f64,
    pub background: Vec<f64>,
    pub mean: OracleMean,
    pub base: bool,
    positions: Vec<(f64, f64)>,
}

#[derive(Debug, Clone)]
pub struct OracleCtx {
    xt: Vec<f64>,
    k: f64,
    sqrt_ab: f64,
}

impl GaussianOracle {
    pub fn new(schedule: NoiseSchedule, image: ImageShape, sigma0: f64, background: Vec<f64>, mean: OracleMean, base: bool) -> Result<Self> {
        check_len(image.len(), background.len())?;
        if !(sigma0 >= 0.0) {
            return Err(param("sigma0", "must be non-negative"));
        }
        if let OracleMean::Templates { templates } = &mean {
            for pair in templates {
                check_len(image.len(), pair[0].len())?;
                check_len(image.len(), pair[1].len())?;
            }
        }
        Ok(Self { positions: image.positions(), schedule, image, sigma0, background, mean, base })
    }

    /// m(c) for one concept.
    pub fn concept_mean(&self, c: &[f64]) -> Vec<f64> {
        let ch = self.image.channels;
        match &self.mean {
            OracleMean::Bump { amplitude, sigma } => {
                let mut out = vec![0.0; self.image.len()];
                for (p, &(u, v)) in self.positions.iter().enumerate() {
                    let r2 = (u - c[0]).powi(2) + (v - c[1]).powi(2);
                    let val = amplitude * (-r2 / (2.0 * sigma * sigma)).exp();
                    out[p * ch..(p + 1) * ch].iter_mut().for_each(|o| *o = val);
                }
                out
            }
            OracleMean::Templates { templates } => {
                let a = templates.len();
                let (l1, l0) = (c[a], c[a + 1]);
                let mut out = vec![0.0; self.image.len()];
                for (k, pair) in templates.iter().enumerate() {
                    if c[k] == 0.0 {
                        continue;
                    }
                    for (i, o) in out.iter_mut().enumerate() {
                        *o += c[k] * (l1 * pair[0][i] + l0 * pair[1][i]);
                    }
                }
                out
            }
        }
    }

    /// Clean-image mean for a concept set: background + Σ m(c^k).
    pub fn scene_mean(&self, set: &ConceptSet) -> Vec<f64> {
        let mut mu = self.background.clone();
        for c in &set.concepts {
            for (m, v) in mu.iter_mut().zip(self.concept_mean(&c.values)) {
                *m += v;
            }
        }
        mu
    }

    fn concept_dim_inner(&self) -> usize {
        match &self.mean {
            OracleMean::Bump { .. } => 2,
            OracleMean::Templates { templates } => templates.len() + 2,
        }
    }
}

impl Denoiser for GaussianOracle {
    type Ctx = OracleCtx;
    type Tape = ();

    fn shape(&self) -> ImageShape {
        self.image
    }

    fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn concept_dim(&self) -> usize {
        self.concept_dim_inner()
    }

    fn uses_base(&self) -> bool {
        self.base
    }

    fn context(&self, xt: &[f64], t: usize) -> OracleCtx {
        let ab = self.schedule.alpha_bar(t);
        let v = 1.0 - ab;
        OracleCtx { xt: xt.to_vec(), k: v.sqrt() / (ab * self.sigma0 * self.sigma0 + v), sqrt_ab: ab.sqrt() }
    }

    fn forward(&self, ctx: &OracleCtx, cond: Cond) -> (Vec<f64>, ()) {
        let (k, sa) = (ctx.k, ctx.sqrt_ab);
        let out = match cond {
            Cond::Base => ctx.xt.iter().zip(&self.background).map(|(x, b)| k * (x - sa * b)).collect(),
            Cond::Concept(c) => {
                let m = self.concept_mean(c);
                if self.base {
                    m.iter().map(|v| -k * sa * v).collect()
                } else {
                    ctx.xt
                        .iter()
                        .zip(&self.background)
                        .zip(&m)
                        .map(|((x, b), v)| k * (x - sa * (b + v)))
                        .collect()
                }
            }
        };
        (out, ())
    }

    fn cond_vjp(&self, ctx: &OracleCtx, cond: &[f64], _tape: &(), upstream: &[f64]) -> Vec<f64> {
        // Every variant has d(term)/d(m) = −k·√ᾱ.
        let scale = -ctx.k * ctx.sqrt_ab;
        let ch = self.image.channels;
        match &self.mean {
            OracleMean::Bump { amplitude, sigma } => {
                let (mut gx, mut gy) = (0.0, 0.0);
                let s2 = sigma * sigma;
                for (p, &(u, v)) in self.positions.iter().enumerate() {
                    let (dx, dy) = (u - cond[0], v - cond[1]);
                    let m = amplitude * (-(dx * dx + dy * dy) / (2.0 * s2)).exp();
                    let up: f64 = upstream[p * ch..(p + 1) * ch].iter().sum();
                    gx += scale * up * m * dx / s2;
                    gy += scale * up * m * dy / s2;
                }
                vec![gx, gy]
            }
            OracleMean::Templates { templates } => {
                let a = templates.len();
                let (l1, l0) = (cond[a], cond[a + 1]);
                let mut g = vec![0.0; a + 2];
                for (k, pair) in templates.iter().enumerate() {
                    let (mut d1, mut d0) = (0.0, 0.0);
                    for (i, u) in upstream.iter().enumerate() {
                        d1 += u * pair[0][i];
                        d0 += u * pair[1][i];
                    }
                    g[k] = scale * (l1 * d1 + l0 * d0);
                    g[a] += scale * cond[k] * d1;
                    g[a + 1] += scale * cond[k] * d0;
                }
                g
            }
        }
    }
}
