//! The pipeline stages. Each reads its inputs from the output directory
//! unless a path is given, and writes deterministic artifacts back into it.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use compdiff::checkpoint::Checkpoint;
use compdiff::eval::{multi_label_accuracy, perception_metrics};
use compdiff::infer::{
    binary_vocabulary, infer_concept_count, infer_continuous_sgd, infer_discrete_enumerate, infer_discrete_relaxed,
    InferenceConfig, InferenceReport,
};
use compdiff::rng::{derive_seed, stream};
use compdiff::train::{smoothed, train_loop};
use compdiff::world::{sample_dataset, SceneDataset, SceneRecord, TaskKind, GLOBAL_ATTRIBUTES};
use compdiff::{DenoiserParams, Network, NoiseSchedule};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{ensure_exists, out_path, ConfigError, Mode, RunConfig};
use crate::overlay;

/// Fills every derived seed from the global one. Seeds are kept below 2^63
/// because TOML integers are signed.
pub fn resolve_seeds(cfg: &mut RunConfig) {
    cfg.train.seed = derive_seed(cfg.seed, "train", 0) >> 1;
    cfg.infer.seed = derive_seed(cfg.seed, "infer", 0) >> 1;
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).context("serializing JSON")?;
    std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn mkdir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))
}

pub fn gen(cfg: &RunConfig) -> Result<()> {
    let d = &cfg.data;
    mkdir(&cfg.out)?;
    for (split, count, k, palette) in
        [("train", d.train_count, d.train_k, &d.train_palette), ("test", d.test_count, d.test_k, &d.test_palette)]
    {
        let seed = derive_seed(cfg.seed, &format!("gen-{split}"), 0);
        let ds = sample_dataset(d.task, count, (k[0], k[1]), &cfg.palette(palette)?, seed, &cfg.world, split)?;
        let path = cfg.out.join(format!("{split}.cdsd"));
        ds.save(&path)?;
        println!("{split}: {count} scenes, K in [{}, {}], palette {palette} -> {}", k[0], k[1], path.display());
    }
    Ok(())
}

fn load_dataset(path: &Path, cfg: &RunConfig) -> Result<SceneDataset> {
    ensure_exists(path, "dataset")?;
    let ds = SceneDataset::load(path)?;
    if ds.header.task != cfg.data.task {
        return Err(ConfigError(format!(
            "{} holds a {:?} dataset but data.task is {:?}",
            path.display(),
            ds.header.task,
            cfg.data.task
        ))
        .into());
    }
    Ok(ds)
}

pub fn train(cfg: &RunConfig, data: Option<&Path>) -> Result<()> {
    let ds = load_dataset(&out_path(cfg, data, "train.cdsd"), cfg)?;
    let arch = cfg.architecture();
    if ds.header.image != arch.image {
        return Err(ConfigError(format!(
            "dataset images are {:?} but the architecture expects {:?}",
            ds.header.image, arch.image
        ))
        .into());
    }
    let schedule = cfg.schedule.build()?;
    let init = DenoiserParams::init(arch, &mut stream(cfg.seed, "init", 0))?;
    let ckpt_dir = cfg.out.join("checkpoints");
    if cfg.train.checkpoint_every.is_some() {
        mkdir(&ckpt_dir)?;
    }
    let budget = cfg.train.step_budget;
    let report = train_loop(&ds, init, &schedule, &cfg.train, |step, params| {
        if step < budget {
            let ck = Checkpoint { params: params.clone(), schedule: cfg.schedule };
            ck.save(&ckpt_dir.join(format!("step-{step:06}.ckpt")))?;
        }
        Ok(())
    })?;
    let model = cfg.out.join("model.ckpt");
    Checkpoint { params: report.params, schedule: cfg.schedule }.save(&model)?;

    let loss_path = cfg.out.join("loss.csv");
    let mut w = csv::Writer::from_path(&loss_path).with_context(|| format!("writing {}", loss_path.display()))?;
    w.write_record(["step", "loss"])?;
    for (i, l) in report.losses.iter().enumerate() {
        w.write_record([(i + 1).to_string(), l.to_string()])?;
    }
    w.flush()?;
    let tail = smoothed(&report.losses, 100);
    println!(
        "trained {budget} steps in {:.1}s; smoothed loss {:.4} -> {:.4}; model -> {}",
        report.wall_clock_secs,
        tail[tail.len().min(100) - 1],
        tail[tail.len() - 1],
        model.display()
    );
    Ok(())
}

fn load_model(path: &Path, ds: &SceneDataset) -> Result<(Network, NoiseSchedule)> {
    ensure_exists(path, "model checkpoint")?;
    let ck = Checkpoint::load(path)?;
    if ck.params.arch.image != ds.header.image {
        return Err(ConfigError(format!(
            "model {} was trained on {:?} images but the dataset holds {:?}",
            path.display(),
            ck.params.arch.image,
            ds.header.image
        ))
        .into());
    }
    let schedule = ck.schedule.build()?;
    Ok((Network::new(&ck.params, &schedule)?, schedule))
}

/// What one scene's inference produced, as consumed by `eval`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub scene: usize,
    pub k_true: usize,
    pub k_hat: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub points: Vec<(f64, f64)>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub bits: Vec<bool>,
}

fn predict(net: &Network, index: usize, rec: &SceneRecord, mode: Mode, base: &InferenceConfig) -> Result<(InferenceReport, Prediction)> {
    let cfg = InferenceConfig { seed: derive_seed(base.seed, "scene", index as u64), ..base.clone() };
    let x = rec.image_f64();
    let report = match mode {
        Mode::FixedK => infer_continuous_sgd(net, &x, rec.concepts.len(), &cfg)?,
        Mode::Count => infer_concept_count(net, &x, &cfg)?,
        Mode::Enumerate => infer_discrete_enumerate(net, &x, &binary_vocabulary(GLOBAL_ATTRIBUTES), &cfg)?,
        Mode::Relaxed => infer_discrete_relaxed(net, &x, GLOBAL_ATTRIBUTES, &cfg)?,
    };
    let (points, bits) = match mode {
        Mode::FixedK | Mode::Count => (report.chosen.points(), vec![]),
        Mode::Enumerate | Mode::Relaxed => (vec![], report.chosen.bits()),
    };
    let pred = Prediction { scene: index, k_true: rec.concepts.len(), k_hat: report.chosen.len(), points, bits };
    Ok((report, pred))
}

fn scene_count(cfg: &RunConfig, ds: &SceneDataset) -> usize {
    cfg.predict.scenes.unwrap_or(ds.records.len()).min(ds.records.len())
}

pub fn infer(cfg: &RunConfig, data: Option<&Path>, model: Option<&Path>) -> Result<()> {
    let ds = load_dataset(&out_path(cfg, data, "test.cdsd"), cfg)?;
    let (net, _) = load_model(&out_path(cfg, model, "model.ckpt"), &ds)?;
    let (reports, overlays) = (cfg.out.join("reports"), cfg.out.join("overlays"));
    mkdir(&reports)?;
    let local = cfg.data.task == TaskKind::Local;
    if local {
        mkdir(&overlays)?;
    }
    let n = scene_count(cfg, &ds);
    let mut preds = Vec::with_capacity(n);
    for (i, rec) in ds.records[..n].iter().enumerate() {
        let (report, pred) = predict(&net, i, rec, cfg.predict.mode, &cfg.infer)?;
        write_json(&reports.join(format!("scene-{i:04}.json")), &report)?;
        if local {
            let truth = if cfg.predict.mark_truth { rec.concepts.points() } else { vec![] };
            let rgb = overlay::render(&rec.image, ds.header.image, &truth, &pred.points);
            overlay::write_ppm(&overlays.join(format!("scene-{i:04}.ppm")), &rgb, ds.header.image, cfg.predict.overlay_scale)?;
        }
        println!("scene {i}: K={} K̂={} error {:.5} ({:.1}s)", pred.k_true, pred.k_hat, report.best_error(), report.wall_clock_secs);
        preds.push(pred);
    }
    let path = cfg.out.join("predictions.json");
    write_json(&path, &preds)?;
    println!("{n} predictions -> {}", path.display());
    Ok(())
}

/// Headline numbers for a batch of predictions.
#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub perception_rate: Option<f64>,
    pub estimation_error: Option<f64>,
    pub count_accuracy: f64,
    pub attribute_accuracy: Option<f64>,
}

fn score(cfg: &RunConfig, ds: &SceneDataset, preds: &[Prediction], csv_path: Option<&Path>) -> Result<Summary> {
    let truth: Vec<&SceneRecord> = preds
        .iter()
        .map(|p| {
            ds.records.get(p.scene).ok_or_else(|| ConfigError(format!("prediction for scene {} has no test record", p.scene)))
        })
        .collect::<std::result::Result<_, _>>()?;
    let count_ok = preds.iter().filter(|p| p.k_hat == p.k_true).count() as f64 / preds.len().max(1) as f64;
    let mut w = match csv_path {
        Some(p) => Some(csv::Writer::from_path(p).with_context(|| format!("writing {}", p.display()))?),
        None => None,
    };
    let summary = if cfg.data.task == TaskKind::Local {
        let pred_pts: Vec<Vec<(f64, f64)>> = preds.iter().map(|p| p.points.clone()).collect();
        let true_pts: Vec<Vec<(f64, f64)>> = truth.iter().map(|r| r.concepts.points()).collect();
        let m = perception_metrics(&pred_pts, &true_pts, cfg.eval.penalty)?;
        if let Some(w) = w.as_mut() {
            w.write_record(["scene_id", "objects", "predicted", "matched", "discovered", "rate", "mse", "count_correct"])?;
            for (p, s) in preds.iter().zip(&m.scenes) {
                let mean = s.mse.iter().sum::<f64>() / s.objects.max(1) as f64;
                w.write_record([
                    p.scene.to_string(),
                    s.objects.to_string(),
                    p.k_hat.to_string(),
                    s.matched.to_string(),
                    s.discovered.to_string(),
                    (s.discovered as f64 / s.objects.max(1) as f64).to_string(),
                    mean.to_string(),
                    u8::from(p.k_hat == p.k_true).to_string(),
                ])?;
            }
            let total = |f: fn(&compdiff::eval::SceneMetrics) -> usize| m.scenes.iter().map(f).sum::<usize>().to_string();
            w.write_record([
                "summary".to_string(),
                total(|s| s.objects),
                preds.iter().map(|p| p.k_hat).sum::<usize>().to_string(),
                total(|s| s.matched),
                total(|s| s.discovered),
                m.perception_rate.to_string(),
                m.estimation_error.to_string(),
                count_ok.to_string(),
            ])?;
        }
        Summary {
            perception_rate: Some(m.perception_rate),
            estimation_error: Some(m.estimation_error),
            count_accuracy: count_ok,
            attribute_accuracy: None,
        }
    } else {
        let pred_bits: Vec<Vec<bool>> = preds.iter().map(|p| p.bits.clone()).collect();
        let true_bits: Vec<Vec<bool>> = truth.iter().map(|r| r.concepts.bits()).collect();
        let acc = multi_label_accuracy(&pred_bits, &true_bits)?;
        if let Some(w) = w.as_mut() {
            w.write_record(["scene_id", "attributes_correct", "all_correct"])?;
            for ((pr, p), t) in preds.iter().zip(&pred_bits).zip(&true_bits) {
                let right = p.iter().zip(t).filter(|(a, b)| a == b).count();
                w.write_record([pr.scene.to_string(), right.to_string(), u8::from(p == t).to_string()])?;
            }
            w.write_record(["summary".to_string(), String::new(), acc.to_string()])?;
        }
        Summary { perception_rate: None, estimation_error: None, count_accuracy: count_ok, attribute_accuracy: Some(acc) }
    };
    if let Some(mut w) = w {
        w.flush()?;
    }
    Ok(summary)
}

pub fn eval(cfg: &RunConfig, data: Option<&Path>, predictions: Option<&Path>) -> Result<()> {
    let ds = load_dataset(&out_path(cfg, data, "test.cdsd"), cfg)?;
    let path = out_path(cfg, predictions, "predictions.json");
    ensure_exists(&path, "predictions file")?;
    let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let preds: Vec<Prediction> =
        serde_json::from_str(&text).map_err(|e| ConfigError(format!("{}: malformed predictions: {e}", path.display())))?;
    if preds.is_empty() {
        return Err(ConfigError(format!("{} holds no predictions", path.display())).into());
    }
    let csv_path = cfg.out.join("metrics.csv");
    let s = score(cfg, &ds, &preds, Some(&csv_path))?;
    println!("{:<22}{:>10}", "scenes", preds.len());
    if let (Some(rate), Some(err)) = (s.perception_rate, s.estimation_error) {
        println!("{:<22}{:>10.3}", "perception rate", rate);
        println!("{:<22}{:>10.5}", "estimation error", err);
        println!("{:<22}{:>10.3}", "count accuracy", s.count_accuracy);
    }
    if let Some(acc) = s.attribute_accuracy {
        println!("{:<22}{:>10.3}", "multi-label accuracy", acc);
    }
    println!("metrics -> {}", csv_path.display());
    Ok(())
}

pub fn sweep(cfg: &RunConfig, data: Option<&Path>, model: Option<&Path>) -> Result<()> {
    let ds = load_dataset(&out_path(cfg, data, "test.cdsd"), cfg)?;
    let (net, _) = load_model(&out_path(cfg, model, "model.ckpt"), &ds)?;
    let n = scene_count(cfg, &ds);
    let cells: Vec<(usize, u64)> =
        cfg.sweep.restarts.iter().flat_map(|&r| cfg.sweep.seeds.iter().map(move |&s| (r, s))).collect();
    // Cells are independent: each one derives its inference seed from its own seed.
    let rows: Vec<Summary> = cells
        .par_iter()
        .map(|&(restarts, seed)| {
            let base = InferenceConfig { restarts, seed: derive_seed(seed, "infer", 0), ..cfg.infer.clone() };
            let preds: Vec<Prediction> = ds.records[..n]
                .iter()
                .enumerate()
                .map(|(i, r)| predict(&net, i, r, cfg.predict.mode, &base).map(|p| p.1))
                .collect::<Result<_>>()?;
            let s = score(cfg, &ds, &preds, None)?;
            eprintln!("cell R={restarts} seed={seed} done");
            Ok(s)
        })
        .collect::<Result<_>>()?;
    let path: PathBuf = cfg.out.join("sweep.csv");
    let mut w = csv::Writer::from_path(&path).with_context(|| format!("writing {}", path.display()))?;
    w.write_record(["restarts", "seed", "scenes", "perception_rate", "estimation_error", "count_accuracy", "attribute_accuracy"])?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for (&(r, s), row) in cells.iter().zip(&rows) {
        w.write_record([
            r.to_string(),
            s.to_string(),
            n.to_string(),
            opt(row.perception_rate),
            opt(row.estimation_error),
            row.count_accuracy.to_string(),
            opt(row.attribute_accuracy),
        ])?;
        println!("R={r:<3} seed={s:<4} rate {} count acc {:.3}", opt(row.perception_rate.or(row.attribute_accuracy)), row.count_accuracy);
    }
    w.flush()?;
    println!("{} cells -> {}", cells.len(), path.display());
    Ok(())
}

pub fn describe(path: &Path) -> Result<()> {
    ensure_exists(path, "file")?;
    let mut magic = [0u8; 4];
    {
        use std::io::Read;
        let mut f = std::fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
        f.read_exact(&mut magic).map_err(|source| compdiff::Error::Io { path: path.to_path_buf(), source })?;
    }
    if magic == compdiff::world::DATASET_MAGIC {
        let h = SceneDataset::describe(path)?;
        println!("{}", serde_json::to_string_pretty(&h)?);
    } else if magic == compdiff::checkpoint::CHECKPOINT_MAGIC {
        let ck = Checkpoint::load(path)?;
        let info = serde_json::json!({
            "arch": ck.params.arch,
            "schedule": ck.schedule,
            "param_count": ck.params.param_count(),
        });
        println!("{}", serde_json::to_string_pretty(&info)?);
    } else {
        return Err(compdiff::Error::Magic { path: path.to_path_buf(), what: "dataset or checkpoint" }.into());
    }
    Ok(())
}
