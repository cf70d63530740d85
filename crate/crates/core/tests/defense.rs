use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use scaforge_core::attack::*;
use scaforge_core::baselines::*;
use scaforge_core::craft::*;
use scaforge_core::harness::config::ExperimentConfig;
use scaforge_core::harness::lab::Lab;
use scaforge_core::noise::MAX_LEVEL;

fn model(seed: u64) -> AttackModel {
    let mut m = AttackModel::new(AttackConfig::preset(2).unwrap(), seed).unwrap();
    m.set_normalization(25.0, 8.0).unwrap();
    m.trained = true;
    m
}

fn traces(seed: u64, n: usize, len: usize) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| (0..len).map(|_| rng.random_range(15.0..35.0)).collect()).collect()
}

fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    (m, xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn quantize_is_monotone_and_nonlinear_sits_below(mut d in prop::collection::vec(-8.0f64..=0.0, 2..40)) {
        d.sort_by(|a, b| b.total_cmp(a));
        let n = UtilityNoise { delta: d, eps: 8.0 };
        let lin = quantize(&n, QuantMode::Linear).unwrap().levels;
        let non = quantize(&n, QuantMode::Nonlinear).unwrap().levels;
        prop_assert!(lin.windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(non.windows(2).all(|w| w[0] <= w[1]));
        for ((l, q), x) in lin.iter().zip(&non).zip(&n.delta) {
            prop_assert!(q <= l);
            let frac = -x / 8.0;
            prop_assert!((f64::from(*l) - frac * 320.0).abs() <= 0.5 + 1e-9);
            prop_assert!((f64::from(*q) - frac * frac * 320.0).abs() <= 0.5 + 1e-9);
        }
    }
}

#[test]
fn fgsm_signs_follow_the_summed_gradient_signs() {
    let m = model(4);
    let label = [2, 9, 2, 20];
    let ts = traces(1, 2, 48);
    let grads: Vec<Vec<f64>> = ts.iter().map(|t| m.input_gradient(t, &label).unwrap().1).collect();

    let one = fgsm_similarity(&m, &ts[..1], &label, 1.0, 8).unwrap();
    let expect: Vec<i8> = grads[0].iter().map(|&g| if g < 0.0 { -1 } else { 1 }).collect();
    assert_eq!(one.signs, expect);
    assert_eq!(one.budget, 8);

    // Where the two traces disagree the sum is exactly zero and resolves to +1.
    let two = fgsm_similarity(&m, &ts, &label, 0.5, 8).unwrap();
    let mut ties = 0;
    for (j, &s) in two.signs.iter().enumerate() {
        let sgn = |v: f64| (v > 0.0) as i32 - (v < 0.0) as i32;
        let total = sgn(grads[0][j]) + sgn(grads[1][j]);
        ties += usize::from(total == 0);
        assert_eq!(s, if total < 0 { -1 } else { 1 }, "readout {j}");
    }
    assert!(ties > 0);
}

#[test]
fn fgsm_rejects_untrained_and_bad_budgets() {
    let mut m = model(1);
    let ts = traces(2, 1, 40);
    assert!(fgsm_similarity(&m, &ts, &[1], 1.0, 0).is_err());
    assert!(fgsm_similarity(&m, &ts, &[1], 1.0, 33).is_err());
    m.trained = false;
    assert!(fgsm_similarity(&m, &ts, &[1], 1.0, 4).is_err());
}

#[test]
fn pgd_with_zero_eps_is_zero() {
    let m = model(2);
    let ts = traces(3, 2, 40);
    let n = universal_pgd(&m, &ts, &[5], &PgdConfig { eps: 0.0, ..PgdConfig::default() }).unwrap();
    assert!(n.delta.iter().all(|&d| d == 0.0));
}

#[test]
fn pgd_descends_the_targeted_loss_and_stays_in_the_ball() {
    let m = model(3);
    let target = [12, 12, 21];
    for seed in 0..5 {
        let ts = traces(10 + seed, 1, 60);
        let cfg = PgdConfig { eps: 6.0, steps: 5, epochs: 1, ..PgdConfig::default() };
        let n = universal_pgd(&m, &ts, &target, &cfg).unwrap();
        n.check().unwrap();
        assert!(n.delta.iter().all(|&d| (-6.0..=0.0).contains(&d)));
        let adv: Vec<f64> = ts[0].iter().zip(&n.delta).map(|(t, d)| t + d).collect();
        assert!(m.loss(&adv, &target).unwrap() <= m.loss(&ts[0], &target).unwrap());
    }
}

fn autocorr(xs: &[f64], lag: usize) -> f64 {
    let (m, v) = mean_var(xs);
    let n = xs.len() - lag;
    (0..n).map(|i| (xs[i] - m) * (xs[i + lag] - m)).sum::<f64>() / (n as f64 * v)
}

#[test]
fn sinusoid_is_periodic_until_redrawn() {
    let fixed = SinusoidParams { sigma: 0.05, redraw_interval: 0, ..SinusoidParams::default() };
    let s: Vec<f64> = sinusoid_schedule(512, &fixed, &SinusoidRanges::default(), 1).unwrap().levels.into_iter().map(f64::from).collect();
    assert!(autocorr(&s, 16) > 0.9);
    assert!(autocorr(&s, 8) < -0.9);

    let redrawn = SinusoidParams { redraw_interval: 32, ..fixed };
    let r = sinusoid_schedule(512, &redrawn, &SinusoidRanges::default(), 1).unwrap().levels;
    assert_eq!(r[..32], sinusoid_schedule(32, &fixed, &SinusoidRanges::default(), 1).unwrap().levels[..]);
    let means: Vec<f64> = r.chunks(32).map(|c| c.iter().map(|&l| f64::from(l)).sum::<f64>() / 32.0).collect();
    assert!(mean_var(&means).1 > 100.0, "segment means barely move: {means:?}");
}

#[test]
fn random_levels_are_uniform() {
    let n = 20_000;
    let s: Vec<f64> = random_schedule(n, MAX_LEVEL, 77).unwrap().levels.into_iter().map(f64::from).collect();
    let (m, _) = mean_var(&s);
    let k = f64::from(MAX_LEVEL) + 1.0;
    let sd = ((k * k - 1.0) / 12.0).sqrt();
    assert!((m - 160.0).abs() < 3.0 * sd / (n as f64).sqrt(), "mean {m}");
    assert!(s.iter().all(|&l| l <= f64::from(MAX_LEVEL)));
    assert!(s.contains(&0.0) && s.contains(&f64::from(MAX_LEVEL)));
}

#[test]
fn fence_flattens_readouts() {
    let lab = Lab::new(ExperimentConfig::default()).unwrap();
    let arch = "Conv3x30-Pool2-FC100-FC200-Softmax".parse().unwrap();
    let victim = lab.victim_power(&arch, 5).unwrap();
    let clean: Vec<f64> = lab.observe(&victim, None, 32, 1.0, 5).unwrap().into_iter().map(f64::from).collect();
    let (setpoint, clean_var) = mean_var(&clean);

    let table = lab.level_table(32, 1.0);
    let per_tap = f64::from(MAX_LEVEL) / table.full_scale_drop();
    let mut fence = ActiveFence::new(0.5, setpoint, per_tap);
    let mut bench = lab.bench(32, 1.0, 5);
    let (levels, readouts) = run_active_fence(&mut bench, &victim, &mut fence, Some(&table)).unwrap();
    assert_eq!(levels.len(), clean.len());
    let fenced: Vec<f64> = readouts.into_iter().map(f64::from).collect();
    let (_, fenced_var) = mean_var(&fenced);
    assert!(fenced_var < clean_var, "fenced {fenced_var} vs clean {clean_var}");
}
