//! Property tests for the structural invariants.

use compdiff::concept::ConceptKind;
use compdiff::denoiser::{composed_denoise, Architecture, DenoiserParams, GaussianOracle, ImageShape, Network, OracleMean};
use compdiff::eval::{brute_force_match, hungarian_match, perception_metrics, MissPenalty};
use compdiff::infer::{ErrorEntry, ErrorTable, SampleList};
use compdiff::rng::stream;
use compdiff::world::{render_scene, sample_dataset, Palette, TaskKind, WorldConfig};
use compdiff::{noise_image, ConceptSet, ConceptVector, NoiseSample, NoiseSchedule, TimeRange};
use proptest::prelude::*;

fn matrix(max: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    (1..=max, 1..=max).prop_flat_map(|(n, m)| prop::collection::vec(prop::collection::vec(0.0..100.0f64, m), n))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn schedule_tables_are_consistent(t in 1usize..400, b0 in 1e-5..0.05f64, span in 0.0..0.5f64) {
        let b1 = (b0 + span).min(0.9);
        let s = NoiseSchedule::linear(t, b0, b1).unwrap();
        let mut prod = 1.0;
        for i in 0..t {
            let b = s.betas()[i];
            prop_assert!(b > 0.0 && b < 1.0);
            if i > 0 && b1 > b0 {
                prop_assert!(b > s.betas()[i - 1]);
            }
            if i > 0 {
                prop_assert!(s.alpha_bars()[i] < s.alpha_bars()[i - 1]);
            }
            prod *= s.alphas()[i];
            prop_assert!((s.alpha_bars()[i] - prod).abs() <= 1e-12 * prod);
        }
        prop_assert_eq!(s.alpha_bar(1), s.alphas()[0]);
        prop_assert!(0.0 < s.alpha_bar(t) && s.alpha_bar(t) <= s.alpha_bar(1) && s.alpha_bar(1) < 1.0);
    }

    #[test]
    fn noising_scales_and_round_trips(x0 in prop::collection::vec(-2.0..2.0f64, 1..50), t in 1usize..=1000, seed in any::<u64>()) {
        let s = NoiseSchedule::linear(1000, 1e-4, 2e-2).unwrap();
        let ab = s.alpha_bar(t);
        let zero = NoiseSample { epsilon: vec![0.0; x0.len()], timestep: t };
        let xt = noise_image(&x0, &zero, &s).unwrap();
        let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
        prop_assert!((norm(&xt) - ab.sqrt() * norm(&x0)).abs() <= 1e-12 * norm(&x0).max(1e-300));
        let mut rng = stream(seed, "prop-noise", 0);
        let draw = NoiseSample::draw(&mut rng, x0.len(), &s, TimeRange { lo: t, hi: t });
        let xt = noise_image(&x0, &draw, &s).unwrap();
        for ((x, e), orig) in xt.iter().zip(&draw.epsilon).zip(&x0) {
            let back = (x - (1.0 - ab).sqrt() * e) / ab.sqrt();
            // Relative to the scale of the terms that were added.
            let scale = orig.abs().max((1.0 - ab).sqrt() * e.abs() / ab.sqrt()).max(1e-3);
            prop_assert!((back - orig).abs() <= 1e-10 * scale);
        }
    }

    #[test]
    fn composition_is_linear_over_concatenation(seed in any::<u64>(), ka in 1usize..4, kb in 1usize..4, t in 1usize..=100) {
        let sched = NoiseSchedule::linear(100, 1e-4, 2e-2).unwrap();
        let p = DenoiserParams::init(Architecture::coordinate(5, 5, 0.1, 0.05), &mut stream(seed, "prop-init", 0)).unwrap();
        let net = Network::new(&p, &sched).unwrap();
        let mut rng = stream(seed, "prop-comp", 0);
        use rand::Rng;
        let pts = |rng: &mut rand_chacha::ChaCha8Rng, k| (0..k).map(|_| (rng.random::<f64>(), rng.random::<f64>())).collect::<Vec<_>>();
        let a = ConceptSet::coordinates(&pts(&mut rng, ka)).unwrap();
        let b = ConceptSet::coordinates(&pts(&mut rng, kb)).unwrap();
        let xt: Vec<f64> = (0..25).map(|_| rng.random_range(-1.0..1.0)).collect();
        let whole = composed_denoise(&net, &xt, t, &a.concat(&b).unwrap()).unwrap();
        let fa = composed_denoise(&net, &xt, t, &a).unwrap();
        let fb = composed_denoise(&net, &xt, t, &b).unwrap();
        for ((w, x), y) in whole.iter().zip(&fa).zip(&fb) {
            prop_assert!((w - (x + y)).abs() <= 1e-12 * (x.abs() + y.abs()).max(1e-12));
        }
    }

    #[test]
    fn hungarian_is_optimal(cost in matrix(6)) {
        let a = hungarian_match(&cost).unwrap();
        let b = brute_force_match(&cost);
        prop_assert_eq!(a.cost, b.cost);
        let matched: Vec<usize> = a.pairs.iter().flatten().copied().collect();
        prop_assert_eq!(matched.len(), cost.len().min(cost[0].len()));
        let mut uniq = matched.clone();
        uniq.sort_unstable();
        uniq.dedup();
        prop_assert_eq!(uniq.len(), matched.len());
        let sum: f64 = a.pairs.iter().enumerate().filter_map(|(i, p)| p.map(|j| cost[i][j])).sum();
        prop_assert_eq!(sum, a.cost);
    }

    #[test]
    fn hungarian_cost_ignores_row_order(cost in matrix(6), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        let mut rows = cost.clone();
        rows.shuffle(&mut stream(seed, "prop-perm", 0));
        let a = hungarian_match(&cost).unwrap().cost;
        let b = hungarian_match(&rows).unwrap().cost;
        prop_assert!((a - b).abs() <= 1e-12 * a.max(1.0));
    }

    #[test]
    fn metrics_ignore_prediction_order(
        truth in prop::collection::vec((0.0..1.0f64, 0.0..1.0f64), 1..5),
        pred in prop::collection::vec((0.0..1.0f64, 0.0..1.0f64), 0..5),
        seed in any::<u64>(),
    ) {
        use rand::seq::SliceRandom;
        let mut shuffled = pred.clone();
        shuffled.shuffle(&mut stream(seed, "prop-relabel", 0));
        let a = perception_metrics(&[pred], &[truth.clone()], MissPenalty::CornerSentinel).unwrap();
        let b = perception_metrics(&[shuffled], &[truth], MissPenalty::CornerSentinel).unwrap();
        prop_assert_eq!(a.perception_rate, b.perception_rate);
        prop_assert!((a.estimation_error - b.estimation_error).abs() <= 1e-12);
        prop_assert!((0.0..=1.0).contains(&a.perception_rate) && a.estimation_error >= 0.0);
    }

    #[test]
    fn worse_candidates_never_change_the_choice(errors in prop::collection::vec(0.0..10.0f64, 1..8), extra in 0.001..5.0f64) {
        let entry = |id, error| ErrorEntry { id, concepts: vec![], weights: None, error, samples: 1 };
        let list = SampleList { seed: 0, stream: "s".into(), count: 1, t_range: TimeRange { lo: 1, hi: 1 } };
        let mut table = ErrorTable { entries: errors.iter().enumerate().map(|(i, &e)| entry(i, e)).collect(), samples: list };
        let before = table.argmin();
        let min = table.entries[before].error;
        prop_assert!(table.entries.iter().all(|e| e.error >= min));
        prop_assert!(table.entries[..before].iter().all(|e| e.error > min));
        table.entries.push(entry(errors.len(), min + extra));
        prop_assert_eq!(table.argmin(), before);
    }

    #[test]
    fn concept_vectors_respect_their_kind(l in -0.5..1.5f64, a in 0usize..4, cx in -1.0..2.0f64, cy in -1.0..2.0f64) {
        let mut r = ConceptVector::relaxed(a, 4, l);
        r.project();
        let w = r.label_weight().unwrap();
        prop_assert!((0.0..=1.0).contains(&w));
        prop_assert_eq!(r.kind, ConceptKind::RelaxedLabel);
        let hard = ConceptVector::label(a, 4, l >= 0.5);
        prop_assert!(hard.validate().is_ok());
        prop_assert_eq!(hard.values.iter().filter(|&&v| v == 1.0).count(), 2);
        let mut c = ConceptVector::coordinate(cx, cy);
        c.project();
        prop_assert!(c.values.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn rendering_is_bounded_and_deterministic(seed in any::<u64>(), k in 1usize..4, global in any::<bool>()) {
        let cfg = WorldConfig::default();
        let (task, pal) = if global { (TaskKind::Global, Palette::b(1)) } else { (TaskKind::Local, Palette::local(1)) };
        let ds = sample_dataset(task, 3, (k, k), &pal, seed, &cfg, "prop").unwrap();
        for r in &ds.records {
            let img = render_scene(&r.spec).unwrap();
            prop_assert!(img.iter().all(|v| (0.0..=1.0).contains(v)));
            prop_assert_eq!(&img, &render_scene(&r.spec).unwrap());
            if !global {
                for &(x, y) in &r.concepts.points() {
                    prop_assert!((0.1..=0.9).contains(&x) && (0.1..=0.9).contains(&y));
                }
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn oracle_sgd_iterates_stay_in_bounds(seed in any::<u64>(), lr in 0.0..20.0f64, k in 1usize..3) {
        use compdiff::infer::{infer_continuous_sgd, InferenceConfig};
        let sched = NoiseSchedule::linear(100, 1e-4, 2e-2).unwrap();
        let o = GaussianOracle::new(sched, ImageShape::new(8, 8, 1), 0.0, vec![0.2; 64], OracleMean::Bump { amplitude: 0.6, sigma: 0.1 }, true).unwrap();
        let x = o.scene_mean(&ConceptSet::coordinates(&[(0.3, 0.6)]).unwrap());
        let cfg = InferenceConfig { learning_rate: lr, sgd_steps: 15, restarts: 3, sample_count: 4, seed, record_trajectories: true, ..Default::default() };
        let r = infer_continuous_sgd(&o, &x, k, &cfg).unwrap();
        for s in &r.restarts {
            for st in s.trajectory.as_ref().unwrap() {
                prop_assert!(st.iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }
    }
}
