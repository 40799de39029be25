use compdiff::rng::stream;
use compdiff::{noise_image, Error, NoiseSample, NoiseSchedule};
use rand_distr::{Distribution, StandardNormal};

/// ᾱ_1000 and ᾱ_50 for the default linear schedule, from a 50-digit decimal
/// running product.
const ALPHA_BAR_1000: f64 = 4.035_829_765_375_683_3e-5;
const ALPHA_BAR_50: f64 = 0.971_015_722_939_440_4;

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs()
}

#[test]
fn default_schedule_has_expected_endpoints() {
    let s = NoiseSchedule::linear(1000, 1e-4, 2e-2).unwrap();
    assert_eq!(s.step_count(), 1000);
    assert_eq!(s.betas()[0], 1e-4);
    assert!(rel(s.betas()[999], 2e-2) < 1e-15);
    assert!(rel(s.alpha_bar(1000), ALPHA_BAR_1000) < 1e-10);
    assert!(rel(s.alpha_bar(50), ALPHA_BAR_50) < 1e-10);
}

#[test]
fn single_step_schedule() {
    let s = NoiseSchedule::linear(1, 0.1, 0.1).unwrap();
    assert!((s.alpha_bar(1) - 0.9).abs() < 1e-15);
}

#[test]
fn invalid_ranges_name_the_field() {
    let field = |e: Error| match e {
        Error::Param { field, .. } => field,
        other => panic!("unexpected {other:?}"),
    };
    assert_eq!(field(NoiseSchedule::linear(0, 1e-4, 2e-2).unwrap_err()), "step_count");
    assert_eq!(field(NoiseSchedule::linear(10, 0.0, 2e-2).unwrap_err()), "beta_start");
    assert_eq!(field(NoiseSchedule::linear(10, 1e-4, 1.0).unwrap_err()), "beta_end");
    assert_eq!(field(NoiseSchedule::linear(10, 0.2, 0.1).unwrap_err()), "beta_end");
}

#[test]
fn timesteps_are_one_based() {
    let s = NoiseSchedule::linear(50, 1e-4, 2e-2).unwrap();
    assert!(s.check_timestep(0).is_err());
    assert!(s.check_timestep(1).is_ok());
    assert!(s.check_timestep(50).is_ok());
    assert!(s.check_timestep(51).is_err());
    assert_eq!(s.alpha_bar(1), s.alphas()[0]);
}

#[test]
fn noise_free_and_signal_free_branches() {
    let s = NoiseSchedule::linear(100, 1e-4, 2e-2).unwrap();
    let x0 = vec![0.2, -0.5, 1.0];
    let t = 37;
    let ab = s.alpha_bar(t);
    let zero = NoiseSample { epsilon: vec![0.0; 3], timestep: t };
    let xt = noise_image(&x0, &zero, &s).unwrap();
    for (a, b) in xt.iter().zip(&x0) {
        assert_eq!(*a, ab.sqrt() * b);
    }
    let eps = NoiseSample { epsilon: vec![0.3, 1.2, -0.7], timestep: t };
    let xt = noise_image(&[0.0; 3], &eps, &s).unwrap();
    for (a, e) in xt.iter().zip(&eps.epsilon) {
        assert_eq!(*a, (1.0 - ab).sqrt() * e);
    }
}

#[test]
fn shape_mismatch_is_a_shape_error() {
    let s = NoiseSchedule::linear(10, 1e-4, 2e-2).unwrap();
    let eps = NoiseSample { epsilon: vec![0.0; 2], timestep: 1 };
    assert!(matches!(noise_image(&[0.0; 3], &eps, &s), Err(Error::Shape { .. })));
}

#[test]
fn monte_carlo_variance_matches_one_minus_alpha_bar() {
    let s = NoiseSchedule::linear(1000, 1e-4, 2e-2).unwrap();
    let t = 300;
    let v = 1.0 - s.alpha_bar(t);
    let x0 = [0.4];
    let n = 100_000;
    let mut rng = stream(11, "mc-variance", 0);
    let draws: Vec<f64> = (0..n)
        .map(|_| {
            let e: f64 = StandardNormal.sample(&mut rng);
            noise_image(&x0, &NoiseSample { epsilon: vec![e], timestep: t }, &s).unwrap()[0]
        })
        .collect();
    let mean = draws.iter().sum::<f64>() / n as f64;
    let var = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    // Standard error of a Gaussian sample variance: v·√(2/(n−1)).
    let se = v * (2.0 / (n - 1) as f64).sqrt();
    assert!((var - v).abs() < 3.0 * se, "variance {var} vs {v} (se {se})");
}
