//! Inverse generative inference: denoising-error scoring and the concept
//! searches built on it (enumeration, multi-restart SGD, count selection,
//! relaxed labels, weighted vocabulary composition).
//!
//! Every search scores candidates against one shared list of (ε, t) draws so
//! that candidates differ only through their concepts. Streams are derived
//! from the config seed: restart r's initialisation, the per-step SGD draws
//! and the final scoring list are independent, so running with more restarts
//! extends the restart set without disturbing the first ones.

use std::time::Instant;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::concept::{ConceptSet, ConceptVector};
use crate::denoiser::{residual_grad_with, Cond, Denoiser};
use crate::error::{check_finite, check_len, param, Error, Result};
use crate::rng::stream;
use crate::schedule::{noise_image, NoiseSample, TimeRange};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitMode {
    /// Uniform inside the concept bounds, shrunk by `init_margin`.
    Uniform,
    /// Standard normal, then projected to the bounds.
    Normal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferenceConfig {
    /// N_sample: draws in every scoring list.
    pub sample_count: usize,
    /// N_step: SGD updates per search.
    pub sgd_steps: usize,
    /// R: random restarts.
    pub restarts: usize,
    /// λ: concept step size, applied to the gradient of the per-pixel mean
    /// squared residual.
    pub learning_rate: f64,
    /// Steps of linear learning-rate warmup.
    pub warmup_steps: usize,
    pub k_min: usize,
    pub k_max: usize,
    pub prune_cadence: Option<usize>,
    pub prune_fraction: f64,
    /// Decay of the running per-restart error used for pruning.
    pub prune_decay: f64,
    /// Timestep sub-range for every draw; `None` is {1..T}.
    pub t_range: Option<TimeRange>,
    pub init: InitMode,
    pub init_margin: f64,
    /// Initial relaxed label weight.
    pub relaxed_init: f64,
    pub enumeration_cap: usize,
    pub record_trajectories: bool,
    pub seed: u64,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            sample_count: 64,
            sgd_steps: 300,
            restarts: 10,
            learning_rate: 0.05,
            warmup_steps: 10,
            k_min: 1,
            k_max: 5,
            prune_cadence: None,
            prune_fraction: 0.5,
            prune_decay: 0.9,
            t_range: None,
            init: InitMode::Uniform,
            init_margin: 0.1,
            relaxed_init: 0.5,
            enumeration_cap: 4096,
            record_trajectories: false,
            seed: 0,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sample_count < 1 {
            return Err(param("sample_count", "must be at least 1"));
        }
        if self.restarts < 1 {
            return Err(param("restarts", "must be at least 1"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(param("learning_rate", "must be finite and non-negative"));
        }
        if self.k_min < 1 || self.k_min > self.k_max {
            return Err(param("k_min", format!("need 1 ≤ k_min ≤ k_max, got [{}, {}]", self.k_min, self.k_max)));
        }
        if !(0.0..1.0).contains(&self.prune_fraction) {
            return Err(param("prune_fraction", "must be in [0, 1)"));
        }
        if self.prune_cadence == Some(0) {
            return Err(param("prune_cadence", "must be positive when set"));
        }
        if !(0.0..=1.0).contains(&self.relaxed_init) {
            return Err(param("relaxed_init", "must be in [0, 1]"));
        }
        if !(0.0..0.5).contains(&self.init_margin) {
            return Err(param("init_margin", "must be in [0, 0.5)"));
        }
        Ok(())
    }
}

/// Recipe for regenerating a shared sample list.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleList {
    pub seed: u64,
    pub stream: String,
    pub count: usize,
    pub t_range: TimeRange,
}

impl SampleList {
    pub fn draw(&self, len: usize, d: &impl Denoiser) -> Vec<NoiseSample> {
        let mut rng = stream(self.seed, &self.stream, 0);
        (0..self.count).map(|_| NoiseSample::draw(&mut rng, len, d.schedule(), self.t_range)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorEntry {
    pub id: usize,
    pub concepts: Vec<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weights: Option<Vec<f64>>,
    /// Σ_i ‖ε_i − composed_i‖² over the shared list.
    pub error: f64,
    pub samples: usize,
}

impl ErrorEntry {
    pub fn mean(&self) -> f64 {
        self.error / self.samples as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorTable {
    pub entries: Vec<ErrorEntry>,
    pub samples: SampleList,
}

impl ErrorTable {
    /// Index of the smallest error; ties go to the lowest id.
    pub fn argmin(&self) -> usize {
        argmin_by(self.entries.iter().map(|e| e.error))
    }
}

fn argmin_by(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::INFINITY);
    for (i, v) in values.enumerate() {
        if v < best.1 {
            best = (i, v);
        }
    }
    best.0
}

/// A candidate composition: concept values and optional per-concept weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub concepts: Vec<Vec<f64>>,
    pub weights: Option<Vec<f64>>,
}

impl Candidate {
    pub fn from_set(set: &ConceptSet) -> Self {
        Self { concepts: set.concepts.iter().map(|c| c.values.clone()).collect(), weights: None }
    }

    fn refs(&self) -> Vec<&[f64]> {
        self.concepts.iter().map(|c| c.as_slice()).collect()
    }
}

/// Prepared per-sample state: noised image, target and the shared base term.
struct Prepared<D: Denoiser> {
    ctx: D::Ctx,
    eps: Vec<f64>,
    base: Option<Vec<f64>>,
}

fn prepare<D: Denoiser>(d: &D, x: &[f64], sample: NoiseSample) -> Result<Prepared<D>> {
    let xt = noise_image(x, &sample, d.schedule())?;
    let ctx = d.context(&xt, sample.timestep);
    let base = d.uses_base().then(|| d.forward(&ctx, Cond::Base).0);
    Ok(Prepared { ctx, eps: sample.epsilon, base })
}

fn squared_residual<D: Denoiser>(d: &D, p: &Prepared<D>, cand: &Candidate) -> f64 {
    let mut sum = p.base.clone().unwrap_or_else(|| vec![0.0; p.eps.len()]);
    for (k, c) in cand.concepts.iter().enumerate() {
        let (o, _) = d.forward(&p.ctx, Cond::Concept(c));
        let w = cand.weights.as_ref().map_or(1.0, |w| w[k]);
        for (s, v) in sum.iter_mut().zip(&o) {
            *s += w * v;
        }
    }
    p.eps.iter().zip(&sum).map(|(e, s)| (e - s).powi(2)).sum()
}

fn check_image<D: Denoiser>(d: &D, x: &[f64]) -> Result<()> {
    check_len(d.shape().len(), x.len())?;
    check_finite(x, "observed image")
}

/// Scores every candidate on one shared list of `list.count` draws.
pub fn score_candidates<D: Denoiser>(d: &D, x: &[f64], candidates: &[Candidate], list: SampleList) -> Result<ErrorTable> {
    check_image(d, x)?;
    if candidates.is_empty() {
        return Err(param("candidates", "need at least one candidate"));
    }
    for c in candidates {
        if c.concepts.iter().any(|v| v.len() != d.concept_dim()) {
            return Err(Error::Shape { expected: d.concept_dim(), found: c.concepts.iter().map(|v| v.len()).max().unwrap_or(0) });
        }
    }
    let prepared: Vec<Prepared<D>> =
        list.draw(x.len(), d).into_iter().map(|s| prepare(d, x, s)).collect::<Result<_>>()?;
    let errors: Vec<f64> = candidates
        .par_iter()
        .map(|cand| prepared.iter().map(|p| squared_residual(d, p, cand)).sum())
        .collect();
    let entries = candidates
        .iter()
        .zip(errors)
        .enumerate()
        .map(|(id, (c, error))| ErrorEntry { id, concepts: c.concepts.clone(), weights: c.weights.clone(), error, samples: list.count })
        .collect();
    Ok(ErrorTable { entries, samples: list })
}

/// Denoising error of each candidate concept set over `sample_count` shared
/// draws with t ~ Unif over `t_range` (default {1..T}).
pub fn denoising_error<D: Denoiser>(
    d: &D,
    x: &[f64],
    sets: &[ConceptSet],
    sample_count: usize,
    seed: u64,
    t_range: Option<TimeRange>,
) -> Result<ErrorTable> {
    if sample_count < 1 {
        return Err(param("sample_count", "must be at least 1"));
    }
    let list = SampleList { seed, stream: "score".into(), count: sample_count, t_range: d.schedule().resolve_range(t_range)? };
    let cands: Vec<Candidate> = sets.iter().map(Candidate::from_set).collect();
    score_candidates(d, x, &cands, list)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RestartSummary {
    pub restart: usize,
    pub k: usize,
    /// Final state (concept values, label weights or composition weights).
    pub state: Vec<f64>,
    /// Step at which the restart was pruned, if it was.
    pub pruned_at: Option<usize>,
    /// Mean error in the final scoring table (absent when pruned).
    pub final_error: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trajectory: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceReport {
    pub chosen: ConceptSet,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub chosen_k: Option<usize>,
    /// Best mean error per K for count searches, as (K, error).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub per_k: Vec<(usize, f64)>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weights: Option<Vec<f64>>,
    pub table: ErrorTable,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub restarts: Vec<RestartSummary>,
    pub seed: u64,
    /// Not serialized, so report files stay byte-identical across runs.
    #[serde(skip)]
    pub wall_clock_secs: f64,
}

impl InferenceReport {
    /// Mean error of the chosen entry.
    pub fn best_error(&self) -> f64 {
        let i = self.table.argmin();
        self.table.entries[i].mean()
    }
}

// ---------------------------------------------------------------------------
// SGD engine

/// How a flat optimisation state maps onto a composition.
trait Search: Sync {
    fn candidate(&self, state: &[f64]) -> Candidate;
    /// Chain the composition gradient back to the state.
    fn state_grad(&self, state: &[f64], concept_grads: &[Vec<f64>], weight_grads: &[f64]) -> Vec<f64>;
    fn project(&self, state: &mut [f64]);
}

struct CoordinateSearch {
    bounds: (f64, f64),
}

impl Search for CoordinateSearch {
    fn candidate(&self, s: &[f64]) -> Candidate {
        Candidate { concepts: s.chunks(2).map(|c| c.to_vec()).collect(), weights: None }
    }
    fn state_grad(&self, _: &[f64], cg: &[Vec<f64>], _: &[f64]) -> Vec<f64> {
        cg.iter().flatten().copied().collect()
    }
    fn project(&self, s: &mut [f64]) {
        s.iter_mut().for_each(|v| *v = v.clamp(self.bounds.0, self.bounds.1));
    }
}

struct RelaxedSearch {
    attributes: usize,
}

impl Search for RelaxedSearch {
    fn candidate(&self, s: &[f64]) -> Candidate {
        let a = self.attributes;
        Candidate { concepts: s.iter().enumerate().map(|(k, &l)| ConceptVector::relaxed(k, a, l).values).collect(), weights: None }
    }
    fn state_grad(&self, _: &[f64], cg: &[Vec<f64>], _: &[f64]) -> Vec<f64> {
        // block [l, 1 − l]
        let a = self.attributes;
        cg.iter().map(|g| g[a] - g[a + 1]).collect()
    }
    fn project(&self, s: &mut [f64]) {
        s.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    }
}

struct WeightSearch {
    vocabulary: Vec<Vec<f64>>,
}

impl Search for WeightSearch {
    fn candidate(&self, s: &[f64]) -> Candidate {
        Candidate { concepts: self.vocabulary.clone(), weights: Some(s.to_vec()) }
    }
    fn state_grad(&self, _: &[f64], _: &[Vec<f64>], wg: &[f64]) -> Vec<f64> {
        wg.to_vec()
    }
    fn project(&self, _: &mut [f64]) {}
}

struct SgdRun {
    states: Vec<Vec<f64>>,
    pruned_at: Vec<Option<usize>>,
    trajectories: Option<Vec<Vec<Vec<f64>>>>,
}

/// Runs N_step updates from the given initial states. Each step draws one
/// (ε, t) from the step stream and applies it to every live restart.
fn run_sgd<D: Denoiser, S: Search>(d: &D, x: &[f64], search: &S, init: Vec<Vec<f64>>, cfg: &InferenceConfig, step_stream: u64) -> Result<SgdRun> {
    let t_range = d.schedule().resolve_range(cfg.t_range)?;
    let n_pix = x.len() as f64;
    let r = init.len();
    let mut states = init;
    let mut live = vec![true; r];
    let mut pruned_at = vec![None; r];
    let mut running = vec![f64::NAN; r];
    let mut trajectories = cfg.record_trajectories.then(|| vec![Vec::new(); r]);
    let mut rng = stream(cfg.seed, "sgd-step", step_stream);
    for n in 0..cfg.sgd_steps {
        let sample = NoiseSample::draw(&mut rng, x.len(), d.schedule(), t_range);
        let p = prepare(d, x, sample)?;
        let warm = if cfg.warmup_steps == 0 { 1.0 } else { ((n + 1) as f64 / cfg.warmup_steps as f64).min(1.0) };
        let step = cfg.learning_rate * warm / n_pix;
        let results: Vec<Option<(Vec<f64>, f64)>> = states
            .par_iter()
            .zip(live.par_iter())
            .map(|(s, &alive)| {
                if !alive {
                    return None;
                }
                let cand = search.candidate(s);
                let rg = residual_grad_with(d, &p.ctx, p.base.as_deref(), &cand.refs(), cand.weights.as_deref(), &p.eps);
                let g = search.state_grad(s, &rg.concepts, &rg.weights);
                let mut next: Vec<f64> = s.iter().zip(&g).map(|(v, gv)| v - step * gv).collect();
                search.project(&mut next);
                Some((next, rg.loss))
            })
            .collect();
        for (i, res) in results.into_iter().enumerate() {
            if let Some((next, loss)) = res {
                if next.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Numeric { context: format!("concept SGD step {n}, restart {i}") });
                }
                states[i] = next;
                running[i] = if running[i].is_nan() { loss } else { cfg.prune_decay * running[i] + (1.0 - cfg.prune_decay) * loss };
                if let Some(tr) = trajectories.as_mut() {
                    tr[i].push(states[i].clone());
                }
            }
        }
        if let Some(cadence) = cfg.prune_cadence {
            if (n + 1) % cadence == 0 {
                prune(&mut live, &running, cfg.prune_fraction, &mut pruned_at, n + 1);
            }
        }
    }
    if !live.iter().any(|&l| l) {
        return Err(Error::Invariant("every restart was pruned".into()));
    }
    Ok(SgdRun { states, pruned_at, trajectories })
}

/// Drops the worst `fraction` of live restarts by running error, always
/// keeping at least one. Ties keep the lower index.
fn prune(live: &mut [bool], running: &[f64], fraction: f64, pruned_at: &mut [Option<usize>], step: usize) {
    let mut alive: Vec<usize> = (0..live.len()).filter(|&i| live[i]).collect();
    let drop = ((alive.len() as f64) * fraction).floor() as usize;
    let drop = drop.min(alive.len().saturating_sub(1));
    alive.sort_by(|&a, &b| running[b].total_cmp(&running[a]).then(b.cmp(&a)));
    for &i in alive.iter().take(drop) {
        live[i] = false;
        pruned_at[i] = Some(step);
    }
}

fn init_states(cfg: &InferenceConfig, r: usize, dim: usize, bounds: (f64, f64), tag: u64) -> Vec<Vec<f64>> {
    (0..r)
        .map(|i| {
            let mut rng = stream(cfg.seed, &format!("restart-init-{tag}"), i as u64);
            (0..dim)
                .map(|_| match cfg.init {
                    InitMode::Uniform => {
                        let span = bounds.1 - bounds.0;
                        let (lo, hi) = (bounds.0 + cfg.init_margin * span, bounds.1 - cfg.init_margin * span);
                        rng.random_range(lo..=hi)
                    }
                    InitMode::Normal => rng.sample::<f64, _>(StandardNormal).clamp(bounds.0, bounds.1),
                })
                .collect()
        })
        .collect()
}

fn coordinate_set(state: &[f64]) -> Result<ConceptSet> {
    ConceptSet::new(state.chunks(2).map(|c| ConceptVector::coordinate(c[0], c[1])).collect())
}

fn scoring_list<D: Denoiser>(d: &D, cfg: &InferenceConfig, name: &str) -> Result<SampleList> {
    Ok(SampleList { seed: cfg.seed, stream: name.into(), count: cfg.sample_count, t_range: d.schedule().resolve_range(cfg.t_range)? })
}

/// Restarts for one K, before final scoring.
fn coordinate_restarts<D: Denoiser>(d: &D, x: &[f64], k: usize, cfg: &InferenceConfig, init: Option<Vec<Vec<f64>>>) -> Result<SgdRun> {
    if d.concept_dim() != 2 {
        return Err(param("concepts", "continuous search needs a coordinate denoiser"));
    }
    let search = CoordinateSearch { bounds: (0.0, 1.0) };
    let init = match init {
        Some(s) => {
            if s.iter().any(|v| v.len() != 2 * k) {
                return Err(param("init", format!("initial states need {} values", 2 * k)));
            }
            s
        }
        None => init_states(cfg, cfg.restarts, 2 * k, search.bounds, k as u64),
    };
    let mut run = run_sgd(d, x, &search, init, cfg, k as u64)?;
    for s in &mut run.states {
        search.project(s);
    }
    Ok(run)
}

fn summaries(run: &SgdRun, k: usize, table: &ErrorTable, ids: &[Option<usize>]) -> Vec<RestartSummary> {
    run.states
        .iter()
        .enumerate()
        .map(|(i, s)| RestartSummary {
            restart: i,
            k,
            state: s.clone(),
            pruned_at: run.pruned_at[i],
            final_error: ids[i].map(|id| table.entries[id].mean()),
            trajectory: run.trajectories.as_ref().map(|t| t[i].clone()),
        })
        .collect()
}

/// Multi-restart SGD over K coordinate concepts; returns the restart with the
/// lowest final denoising error.
pub fn infer_continuous_sgd<D: Denoiser>(d: &D, x: &[f64], k: usize, cfg: &InferenceConfig) -> Result<InferenceReport> {
    infer_continuous_sgd_from(d, x, k, cfg, None)
}

/// As [`infer_continuous_sgd`] with explicit initial states (one per restart).
pub fn infer_continuous_sgd_from<D: Denoiser>(
    d: &D,
    x: &[f64],
    k: usize,
    cfg: &InferenceConfig,
    init: Option<Vec<Vec<f64>>>,
) -> Result<InferenceReport> {
    cfg.validate()?;
    check_image(d, x)?;
    if k < 1 {
        return Err(param("k", "must be at least 1"));
    }
    let start = Instant::now();
    let run = coordinate_restarts(d, x, k, cfg, init)?;
    let (cands, ids) = live_candidates(&run, &CoordinateSearch { bounds: (0.0, 1.0) }, 0);
    let table = score_candidates(d, x, &cands, scoring_list(d, cfg, "final-score")?)?;
    let best = table.argmin();
    let winner = table.entries[best].concepts.concat();
    Ok(InferenceReport {
        chosen: coordinate_set(&winner)?,
        chosen_k: None,
        per_k: vec![],
        weights: None,
        restarts: summaries(&run, k, &table, &ids),
        table,
        seed: cfg.seed,
        wall_clock_secs: start.elapsed().as_secs_f64(),
    })
}

/// Candidates for the restarts that survived pruning; ids are assigned from
/// `offset` upwards. Returns the table id of each restart (None if pruned).
fn live_candidates<S: Search>(run: &SgdRun, search: &S, offset: usize) -> (Vec<Candidate>, Vec<Option<usize>>) {
    let mut cands = Vec::new();
    let mut ids = Vec::new();
    for (i, s) in run.states.iter().enumerate() {
        if run.pruned_at[i].is_none() {
            ids.push(Some(offset + cands.len()));
            cands.push(search.candidate(s));
        } else {
            ids.push(None);
        }
    }
    (cands, ids)
}

/// Concept-count search: runs the restart SGD for each K in [k_min, k_max]
/// and picks the K whose best restart has the lowest error. All K share one
/// final scoring list.
pub fn infer_concept_count<D: Denoiser>(d: &D, x: &[f64], cfg: &InferenceConfig) -> Result<InferenceReport> {
    cfg.validate()?;
    check_image(d, x)?;
    let start = Instant::now();
    let mut all = Vec::new();
    let mut runs = Vec::new();
    for k in cfg.k_min..=cfg.k_max {
        let run = coordinate_restarts(d, x, k, cfg, None)?;
        let (cands, ids) = live_candidates(&run, &CoordinateSearch { bounds: (0.0, 1.0) }, all.len());
        all.extend(cands);
        runs.push((k, run, ids));
    }
    let table = score_candidates(d, x, &all, scoring_list(d, cfg, "final-score")?)?;
    let mut per_k = Vec::new();
    let mut restarts = Vec::new();
    for (k, run, ids) in &runs {
        let best = ids.iter().flatten().map(|&id| table.entries[id].mean()).fold(f64::INFINITY, f64::min);
        per_k.push((*k, best));
        restarts.extend(summaries(run, *k, &table, ids));
    }
    let ki = argmin_by(per_k.iter().map(|p| p.1));
    let k_hat = per_k[ki].0;
    // best restart within the chosen K
    let (_, _, ids) = &runs[ki];
    let best_id = ids
        .iter()
        .flatten()
        .copied()
        .min_by(|&a, &b| table.entries[a].error.total_cmp(&table.entries[b].error).then(a.cmp(&b)))
        .ok_or_else(|| Error::Invariant("no surviving restart".into()))?;
    let winner = table.entries[best_id].concepts.concat();
    Ok(InferenceReport {
        chosen: coordinate_set(&winner)?,
        chosen_k: Some(k_hat),
        per_k,
        weights: None,
        restarts,
        table,
        seed: cfg.seed,
        wall_clock_secs: start.elapsed().as_secs_f64(),
    })
}

/// Exhaustive search over every tuple drawn from per-slot vocabularies.
pub fn infer_discrete_enumerate<D: Denoiser>(
    d: &D,
    x: &[f64],
    vocabulary: &[Vec<ConceptVector>],
    cfg: &InferenceConfig,
) -> Result<InferenceReport> {
    cfg.validate()?;
    check_image(d, x)?;
    if vocabulary.is_empty() || vocabulary.iter().any(|v| v.is_empty()) {
        return Err(param("vocabulary", "every slot needs at least one label"));
    }
    let configs = vocabulary.iter().try_fold(1u128, |acc, v| acc.checked_mul(v.len() as u128)).unwrap_or(u128::MAX);
    if configs > cfg.enumeration_cap as u128 {
        return Err(Error::EnumerationCap { configs, cap: cfg.enumeration_cap });
    }
    let start = Instant::now();
    // Mixed-radix order: the last slot varies fastest.
    let decode = |mut id: usize| -> Vec<usize> {
        let mut idx = vec![0; vocabulary.len()];
        for (slot, v) in vocabulary.iter().enumerate().rev() {
            idx[slot] = id % v.len();
            id /= v.len();
        }
        idx
    };
    let cands: Vec<Candidate> = (0..configs as usize)
        .map(|id| Candidate {
            concepts: decode(id).iter().zip(vocabulary).map(|(&i, v)| v[i].values.clone()).collect(),
            weights: None,
        })
        .collect();
    let table = score_candidates(d, x, &cands, scoring_list(d, cfg, "enumerate")?)?;
    let chosen: Vec<ConceptVector> = decode(table.argmin()).iter().zip(vocabulary).map(|(&i, v)| v[i].clone()).collect();
    Ok(InferenceReport {
        chosen: ConceptSet::new(chosen)?,
        chosen_k: None,
        per_k: vec![],
        weights: None,
        restarts: vec![],
        table,
        seed: cfg.seed,
        wall_clock_secs: start.elapsed().as_secs_f64(),
    })
}

/// Binary vocabulary for `attributes` label slots.
pub fn binary_vocabulary(attributes: usize) -> Vec<Vec<ConceptVector>> {
    (0..attributes)
        .map(|k| vec![ConceptVector::label(k, attributes, false), ConceptVector::label(k, attributes, true)])
        .collect()
}

/// Gradient search over relaxed labels l ∈ [0, 1] (block [l, 1 − l]),
/// thresholded at 0.5 (below is 0, otherwise 1).
pub fn infer_discrete_relaxed<D: Denoiser>(d: &D, x: &[f64], attributes: usize, cfg: &InferenceConfig) -> Result<InferenceReport> {
    infer_discrete_relaxed_from(d, x, attributes, cfg, None)
}

pub fn infer_discrete_relaxed_from<D: Denoiser>(
    d: &D,
    x: &[f64],
    attributes: usize,
    cfg: &InferenceConfig,
    init: Option<Vec<f64>>,
) -> Result<InferenceReport> {
    cfg.validate()?;
    check_image(d, x)?;
    if attributes < 1 || d.concept_dim() != attributes + 2 {
        return Err(param("attributes", format!("denoiser expects {} label entries", d.concept_dim())));
    }
    let start = Instant::now();
    let search = RelaxedSearch { attributes };
    let init = init.unwrap_or_else(|| vec![cfg.relaxed_init; attributes]);
    check_len(attributes, init.len())?;
    let run = run_sgd(d, x, &search, vec![init], cfg, 0)?;
    let bits: Vec<bool> = run.states[0].iter().map(|&l| l >= 0.5).collect();
    let chosen = ConceptSet::labels(&bits)?;
    let table = score_candidates(d, x, &[Candidate::from_set(&chosen)], scoring_list(d, cfg, "relaxed-score")?)?;
    Ok(InferenceReport {
        chosen,
        chosen_k: None,
        per_k: vec![],
        weights: None,
        restarts: vec![RestartSummary {
            restart: 0,
            k: attributes,
            state: run.states[0].clone(),
            pruned_at: None,
            final_error: Some(table.entries[0].mean()),
            trajectory: run.trajectories.as_ref().map(|t| t[0].clone()),
        }],
        table,
        seed: cfg.seed,
        wall_clock_secs: start.elapsed().as_secs_f64(),
    })
}

/// Learns one weight per vocabulary concept for Σ_k w^k ε(x_t | c^k) and
/// returns the `pick` concepts with the largest weights (ties: lowest index).
pub fn infer_weighted_composition<D: Denoiser>(
    d: &D,
    x: &[f64],
    vocabulary: &[ConceptVector],
    pick: usize,
    cfg: &InferenceConfig,
) -> Result<InferenceReport> {
    cfg.validate()?;
    check_image(d, x)?;
    let v = vocabulary.len();
    if pick < 1 || pick > v {
        return Err(param("pick", format!("need 1 ≤ pick ≤ {v}")));
    }
    for c in vocabulary {
        check_len(d.concept_dim(), c.dim())?;
    }
    let start = Instant::now();
    let search = WeightSearch { vocabulary: vocabulary.iter().map(|c| c.values.clone()).collect() };
    let init = vec![pick as f64 / v as f64; v];
    let run = run_sgd(d, x, &search, vec![init], cfg, 0)?;
    let w = run.states[0].clone();
    let mut order: Vec<usize> = (0..v).collect();
    order.sort_by(|&a, &b| w[b].total_cmp(&w[a]).then(a.cmp(&b)));
    let mut picked: Vec<usize> = order[..pick].to_vec();
    picked.sort_unstable();
    let chosen = ConceptSet::new(picked.iter().map(|&i| vocabulary[i].clone()).collect())?;
    let table = score_candidates(d, x, &[Candidate::from_set(&chosen)], scoring_list(d, cfg, "weighted-score")?)?;
    Ok(InferenceReport {
        chosen,
        chosen_k: None,
        per_k: vec![],
        weights: Some(w),
        restarts: vec![],
        table,
        seed: cfg.seed,
        wall_clock_secs: start.elapsed().as_secs_f64(),
    })
}

/// Indices of the picked concepts within the vocabulary (sorted).
pub fn picked_indices(report: &InferenceReport, vocabulary: &[ConceptVector]) -> Vec<usize> {
    report.chosen.concepts.iter().filter_map(|c| vocabulary.iter().position(|v| v == c)).collect()
}

