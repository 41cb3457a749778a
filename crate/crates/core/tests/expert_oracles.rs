use egpo_core::expert::{ExpertConfig, ExpertPolicy};
use egpo_core::guardian::quadrature_box;
use egpo_core::rng;
use egpo_core::sim::{generate_scene, DifficultyConfig, DrivingEnv, EnvConfig};

fn env_at(seed: u64, steps: usize) -> DrivingEnv {
    let sc = generate_scene(seed, &DifficultyConfig::default());
    let mut env = DrivingEnv::new(EnvConfig::default(), sc);
    env.reset();
    let ex = ExpertPolicy::new(ExpertConfig::default()).unwrap();
    let mut r = rng::derive(seed, 77);
    for _ in 0..steps {
        let a = ex.sample(&env.context(), &mut r);
        env.step(a).unwrap();
    }
    env
}

fn std_normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// `E[tanh(m + s Z)]` by a fine midpoint rule on `m +- 10 s`.
fn squashed_mean(m: f64, s: f64) -> f64 {
    let n = 20_000;
    let h = 20.0 * s / n as f64;
    let mut acc = 0.0;
    for k in 0..n {
        let u = m - 10.0 * s + (k as f64 + 0.5) * h;
        let z = (u - m) / s;
        acc += u.tanh() * (-0.5 * z * z).exp();
    }
    acc * h / (s * (2.0 * std::f64::consts::PI).sqrt())
}

#[test]
fn monte_carlo_mean_within_three_standard_errors() {
    let env = env_at(1001, 40);
    let ex = ExpertPolicy::new(ExpertConfig::default()).unwrap();
    let ctx = env.context();
    let dist = ex.distribution(&ctx);
    let mut r = rng::derive(9, 1);
    let n = 10_000;
    let samples: Vec<[f64; 2]> = (0..n).map(|_| ex.sample(&ctx, &mut r)).collect();
    for k in 0..2 {
        let mean = samples.iter().map(|a| a[k]).sum::<f64>() / n as f64;
        let var = samples.iter().map(|a| (a[k] - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let se = (var / n as f64).sqrt();
        let want = squashed_mean(dist.mean[k], dist.std[k]);
        assert!((mean - want).abs() < 3.0 * se, "dim {k}: {mean} vs {want} (se {se})");
    }
}

#[test]
fn density_integrates_to_one() {
    let ex = ExpertPolicy::new(ExpertConfig::default()).unwrap();
    for (seed, steps) in [(1002, 0), (1003, 30), (1004, 60)] {
        let env = env_at(seed, steps);
        let ctx = env.context();
        let total = quadrature_box(|a| ex.density(&ctx, a), 200);
        assert!((total - 1.0).abs() < 1e-3, "seed {seed}: {total}");
    }
}

#[test]
fn mode_is_the_grid_maximum() {
    let env = env_at(1005, 25);
    let ex = ExpertPolicy::new(ExpertConfig::default()).unwrap();
    let ctx = env.context();
    let mode = ex.distribution(&ctx).mode();
    let at_mode = ex.density(&ctx, [mode[0], mode[1]]);
    let n = 400;
    for i in 0..n {
        for j in 0..n {
            let a = [-1.0 + (i as f64 + 0.5) * 2.0 / n as f64, -1.0 + (j as f64 + 0.5) * 2.0 / n as f64];
            assert!(ex.density(&ctx, a) <= at_mode * (1.0 + 1e-12));
        }
    }
}

#[test]
fn marginals_pass_kolmogorov_smirnov() {
    let env = env_at(1006, 50);
    let ex = ExpertPolicy::new(ExpertConfig::default()).unwrap();
    let ctx = env.context();
    let dist = ex.distribution(&ctx);
    let mut r = rng::derive(9, 2);
    let n = 10_000;
    let samples: Vec<[f64; 2]> = (0..n).map(|_| ex.sample(&ctx, &mut r)).collect();
    let critical = 1.628 / (n as f64).sqrt();
    for k in 0..2 {
        let mut xs: Vec<f64> = samples.iter().map(|a| a[k]).collect();
        xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut dmax: f64 = 0.0;
        for (i, x) in xs.iter().enumerate() {
            let cdf = std_normal_cdf((x.atanh() - dist.mean[k]) / dist.std[k]);
            let lo = i as f64 / n as f64;
            let hi = (i + 1) as f64 / n as f64;
            dmax = dmax.max((cdf - lo).abs()).max((hi - cdf).abs());
        }
        assert!(dmax < critical, "dim {k}: D = {dmax}, critical {critical}");
    }
}

#[test]
fn actions_stay_inside_the_box() {
    let env = env_at(1007, 10);
    let ex = ExpertPolicy::new(ExpertConfig::with_quality(0.0)).unwrap();
    let mut r = rng::derive(9, 3);
    for _ in 0..10_000 {
        let a = ex.sample(&env.context(), &mut r);
        assert!(a.iter().all(|v| v.abs() < 1.0));
    }
}

#[test]
fn no_obstacles_means_no_failures() {
    let cfg = DifficultyConfig {
        n_obstacles: (0, 0),
        n_traffic: (0, 0),
        ..DifficultyConfig::default()
    };
    let scenes: Vec<_> = (1000..1010).map(|s| generate_scene(s, &cfg)).collect();
    let ex = ExpertPolicy::new(ExpertConfig {
        avoidance: false,
        ..ExpertConfig::default()
    })
    .unwrap();
    let est = ex
        .estimate_failure_rate(&EnvConfig::default(), &scenes, 10, &mut rng::derive(1, 1))
        .unwrap();
    assert_eq!(est.unsafe_steps, 0);
    assert_eq!(est.epsilon, 0.0);
}

#[test]
fn lower_quality_fails_more_often() {
    let scenes: Vec<_> = (1000..1050)
        .map(|s| generate_scene(s, &DifficultyConfig::default()))
        .collect();
    let eps = |q: f64| {
        ExpertPolicy::new(ExpertConfig::with_quality(q))
            .unwrap()
            .estimate_failure_rate(&EnvConfig::default(), &scenes, 50, &mut rng::derive(4, 4))
            .unwrap()
    };
    let good = eps(1.0);
    let bad = eps(0.3);
    assert!(good.epsilon < bad.epsilon, "{} vs {}", good.epsilon, bad.epsilon);
    assert!(good.upper < bad.lower);
}
