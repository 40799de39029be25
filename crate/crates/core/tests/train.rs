use compdiff::checkpoint::Checkpoint;
use compdiff::denoiser::{composed_denoise, grad_params, scene_denoise, Architecture, DenoiserParams, Network};
use compdiff::rng::stream;
use compdiff::train::*;
use compdiff::world::*;
use compdiff::{noise_image, ConceptSet, Error, NoiseSample, NoiseSchedule, ScheduleConfig};

fn sched() -> NoiseSchedule {
    ScheduleConfig::default().build().unwrap()
}

fn fixture() -> (SceneDataset, DenoiserParams) {
    let cfg = WorldConfig { height: 8, width: 8, ..Default::default() };
    let ds = sample_dataset(TaskKind::Local, 64, (1, 2), &Palette::local(1), 21, &cfg, "fixture").unwrap();
    let arch = Architecture::coordinate(8, 8, cfg.blob_sigma(), 0.05);
    let p = DenoiserParams::init(arch, &mut stream(21, "init", 0)).unwrap();
    (ds, p)
}

#[test]
fn zero_rate_leaves_parameters_unchanged() {
    let (ds, p) = fixture();
    let mut tr = Trainer::new(p.clone(), sched());
    let x = ds.records[0].image_f64();
    let cfg = TrainConfig { learning_rate: 0.0, ..Default::default() };
    let loss = tr.train_step(&[(&x, &ds.records[0].concepts)], &cfg, &mut stream(1, "b", 0)).unwrap();
    assert!(loss > 0.0);
    assert_eq!(tr.params, p);
}

#[test]
fn single_scene_loss_is_the_scene_residual() {
    let (ds, p) = fixture();
    let rec = ds.records.iter().find(|r| r.concepts.len() == 1).unwrap();
    let x = rec.image_f64();
    let s = sched();
    let mut rng = stream(2, "b", 0);
    let mut replay = rng.clone();
    let mut tr = Trainer::new(p.clone(), s.clone());
    let loss = tr.train_step(&[(&x, &rec.concepts)], &TrainConfig::default(), &mut rng).unwrap();
    let draw = NoiseSample::draw(&mut replay, x.len(), &s, s.full_range());
    let xt = noise_image(&x, &draw, &s).unwrap();
    let net = Network::new(&p, &s).unwrap();
    let pred = scene_denoise(&net, &xt, draw.timestep, &rec.concepts).unwrap();
    let want: f64 = pred.iter().zip(&draw.epsilon).map(|(a, e)| (e - a).powi(2)).sum::<f64>() / x.len() as f64;
    assert!((loss - want).abs() <= 1e-12 * want, "{loss} vs {want}");
}

#[test]
fn empty_batch_and_blow_up_are_errors() {
    let (ds, p) = fixture();
    let mut tr = Trainer::new(p, sched());
    assert!(matches!(tr.train_step(&[], &TrainConfig::default(), &mut stream(3, "b", 0)), Err(Error::Param { .. })));
    let cfg = TrainConfig { learning_rate: 1e300, optimizer: Optimizer::PlainSgd, step_budget: 5, batch_size: 4, ..Default::default() };
    match train_loop(&ds, tr.params.clone(), &sched(), &cfg, |_, _| Ok(())) {
        Err(Error::NonFiniteLoss { step }) => assert!(step < 5),
        other => panic!("expected a non-finite loss error, got {:?}", other.map(|r| r.losses)),
    }
}

#[test]
fn one_step_budget() {
    let (ds, p) = fixture();
    let cfg = TrainConfig { step_budget: 1, batch_size: 4, ..Default::default() };
    let mut calls = vec![];
    let rep = train_loop(&ds, p.clone(), &sched(), &cfg, |s, _| {
        calls.push(s);
        Ok(())
    })
    .unwrap();
    assert_eq!(rep.losses.len(), 1);
    assert_eq!(rep.steps, 1);
    assert_ne!(rep.params, p);
    assert_eq!(calls, vec![1]);
}

#[test]
fn checkpoint_cadence() {
    let (ds, p) = fixture();
    let cfg = TrainConfig { step_budget: 7, batch_size: 2, checkpoint_every: Some(3), ..Default::default() };
    let mut calls = vec![];
    train_loop(&ds, p, &sched(), &cfg, |s, _| {
        calls.push(s);
        Ok(())
    })
    .unwrap();
    assert_eq!(calls, vec![3, 6, 7]);
}

#[test]
fn same_seed_gives_identical_checkpoints() {
    let (ds, p) = fixture();
    let cfg = TrainConfig { step_budget: 20, batch_size: 4, seed: 9, ..Default::default() };
    let bytes = || {
        let rep = train_loop(&ds, p.clone(), &sched(), &cfg, |_, _| Ok(())).unwrap();
        Checkpoint { params: rep.params, schedule: ScheduleConfig::default() }.to_bytes()
    };
    assert_eq!(bytes(), bytes());
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let (_, p) = fixture();
    let dir = std::env::temp_dir().join(format!("compdiff-train-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("p.ckpt");
    let ck = Checkpoint { params: p, schedule: ScheduleConfig::default() };
    ck.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back, ck);
    let mut bytes = std::fs::read(&path).unwrap();
    bytes.truncate(bytes.len() - 3);
    std::fs::write(&path, &bytes).unwrap();
    assert!(matches!(Checkpoint::load(&path), Err(Error::Truncated { .. })));
}

/// Recorded fixture run (budget 6000, seed 4): mean of the first 50 losses
/// at batch 16, and the final smoothed loss (trailing mean over the last
/// tenth of the budget) at batch 16 and 32.
const FIXTURE_FIRST_B16: f64 = 8.730232656853763;
const FIXTURE_LAST_B16: f64 = 0.027967591532125115;
const FIXTURE_LAST_B32: f64 = 0.026697179196036255;

#[test]
fn doubling_the_batch_reaches_the_same_loss() {
    let (ds, p) = fixture();
    let budget = 6000;
    let run = |batch| {
        let cfg = TrainConfig { step_budget: budget, batch_size: batch, seed: 4, ..Default::default() };
        let rep = train_loop(&ds, p.clone(), &sched(), &cfg, |_, _| Ok(())).unwrap();
        assert!(rep.losses.iter().all(|l| l.is_finite() && *l >= 0.0));
        let first = smoothed(&rep.losses[..50], 50)[49];
        (first, *smoothed(&rep.losses, budget / 10).last().unwrap())
    };
    let (first, last16) = run(16);
    let (_, last32) = run(32);
    assert!(last16 < 0.01 * first, "no training progress: {first} -> {last16}");
    assert!((last32 - last16).abs() <= 0.2 * last16, "batch 16 ends at {last16}, batch 32 at {last32}");
    for (got, want) in [(first, FIXTURE_FIRST_B16), (last16, FIXTURE_LAST_B16), (last32, FIXTURE_LAST_B32)] {
        assert!((got - want).abs() <= 1e-9 * want, "{got} vs recorded {want}");
    }
}

#[test]
fn duplicated_concepts_double_the_summand() {
    let (ds, p) = fixture();
    let s = sched();
    let net = Network::new(&p, &s).unwrap();
    let x = ds.records[0].image_f64();
    let c = ds.records[0].concepts.concepts[0].clone();
    let single = ConceptSet::new(vec![c.clone()]).unwrap();
    let double = ConceptSet::new(vec![c.clone(), c]).unwrap();
    let t = 30;
    let eps: Vec<f64> = (0..x.len()).map(|i| (i as f64 * 0.7).cos()).collect();
    let xt = noise_image(&x, &NoiseSample { epsilon: eps.clone(), timestep: t }, &s).unwrap();
    // Same residual ε − 2f in both: the single-term target absorbs one copy.
    let f = composed_denoise(&net, &xt, t, &single).unwrap();
    let shifted: Vec<f64> = eps.iter().zip(&f).map(|(e, v)| e - v).collect();
    let gd = grad_params(&net, &xt, t, &double, false, &eps).unwrap();
    let gs = grad_params(&net, &xt, t, &single, false, &shifted).unwrap();
    for (a, b) in gd.iter().zip(&gs) {
        assert!((a - 2.0 * b).abs() <= 1e-10 * a.abs().max(1e-8), "{a} vs 2×{b}");
    }
}
