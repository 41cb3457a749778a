use egpo_core::expert::{ExpertConfig, ExpertPolicy};
use egpo_core::guardian::GuardianMode;
use egpo_core::harness::report::{aggregate, find_summaries, load_summary};
use egpo_core::harness::{
    build_scenes, collect_dataset, evaluate_checkpoint, evaluate_expert, metrics::read_metrics, run, train, Method,
    MetricsRecord, RunConfig, Split,
};
use egpo_core::learner::Agent;
use egpo_core::rng;
use egpo_core::sim::SeedRange;

fn small(method: Method) -> RunConfig {
    let mut c = RunConfig {
        method,
        seed: 3,
        total_env_steps: 2400,
        eval_every: 800,
        eval_episodes: 2,
        train_scenes: SeedRange { start: 0, count: 10 },
        test_scenes: SeedRange { start: 1000, count: 4 },
        ..Default::default()
    };
    c.learner.hidden = vec![16, 16];
    c.learner.batch_size = 32;
    c.learner.demo_batch_size = 16;
    c.learner.warmup_steps = 600;
    c.learner.updates_per_step = 0.25;
    c.learner.learning_rate = 1e-3;
    c
}

/// Everything in a record except the multiplier bookkeeping and the
/// intervention critic, which differ by construction between EGPO and SAC.
fn core_fields(r: &MetricsRecord) -> (usize, Split, usize, u64, u64, u64, u64, u64, Option<u64>, Option<u64>) {
    (
        r.step,
        r.split,
        r.episodes,
        r.episodic_return.to_bits(),
        r.episodic_cost.to_bits(),
        r.success_rate.to_bits(),
        r.intervention_frequency.to_bits(),
        r.mean_velocity.to_bits(),
        r.critic_loss.map(f64::to_bits),
        r.actor_loss.map(f64::to_bits),
    )
}

#[test]
fn sac_is_reproducible() {
    let (a1, s1) = train(&small(Method::Sac), None).unwrap();
    let (a2, s2) = train(&small(Method::Sac), None).unwrap();
    assert_eq!(s1.records, s2.records);
    assert_eq!(s1.train_episodes, s2.train_episodes);
    assert_eq!(a1.policy.params, a2.policy.params);
    assert!(a1.updates > 0);
}

#[test]
fn sac_rs_with_zero_weight_is_sac() {
    let mut rs = small(Method::SacRs);
    rs.cost_weight = 0.0;
    let (a_rs, s_rs) = train(&rs, None).unwrap();
    let (a, s) = train(&small(Method::Sac), None).unwrap();
    assert_eq!(s_rs.records, s.records);
    assert_eq!(a_rs.policy.params, a.policy.params);
    assert_eq!(a_rs.q1.params(), a.q1.params());
}

#[test]
fn reduced_egpo_is_sac() {
    let mut e = small(Method::Egpo);
    e.guardian.mode = GuardianMode::Off;
    e.ablation.no_cql = true;
    e.ablation.no_intervention_min = true;
    let (ae, se) = train(&e, None).unwrap();
    let (a, s) = train(&small(Method::Sac), None).unwrap();
    assert_eq!(se.records.len(), s.records.len());
    for (x, y) in se.records.iter().zip(&s.records) {
        assert_eq!(core_fields(x), core_fields(y));
    }
    assert_eq!(ae.policy.params, a.policy.params);
    assert_eq!(ae.q1.params(), a.q1.params());
    assert_eq!(ae.q2_target.params(), a.q2_target.params());
    assert_eq!(ae.lambda(), 0.0);
}

#[test]
fn shaped_reward_changes_sac_rs() {
    let mut rs = small(Method::SacRs);
    rs.cost_weight = 5.0;
    let (a_rs, _) = train(&rs, None).unwrap();
    let (a, s) = train(&small(Method::Sac), None).unwrap();
    if s.train_episodes.iter().any(|e| e.cost > 0.0) {
        assert_ne!(a_rs.q1.params(), a.q1.params());
    }
}

#[test]
fn egpo_run_directory_and_evaluation_contract() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(Method::Egpo);
    let (_, summary) = train(&cfg, Some(dir.path())).unwrap();

    // files
    for f in ["config.toml", "metrics.jsonl", "summary.json", "checkpoints/final.ckpt"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let recs = read_metrics(&dir.path().join("metrics.jsonl")).unwrap();
    assert_eq!(recs, summary.records);
    // one record per (step, split), monotone in step
    for w in recs.windows(2) {
        assert!(w[0].step < w[1].step || (w[0].step == w[1].step && w[0].split == Split::Train && w[1].split == Split::Test));
    }
    assert_eq!(recs.last().unwrap().step, cfg.total_env_steps);
    // evaluation never calls the guardian
    assert!(recs.iter().filter(|r| r.split == Split::Test).all(|r| r.intervention_frequency == 0.0));
    // but training does
    assert!(recs.iter().any(|r| r.split == Split::Train && r.intervention_frequency > 0.0));
    let train_recs: Vec<_> = recs.iter().filter(|r| r.split == Split::Train && r.step > cfg.learner.warmup_steps).collect();
    assert!(train_recs.iter().all(|r| r.critic_loss.is_some() && r.qc_loss.is_some()));

    // the saved config reproduces the run
    let again = RunConfig::load(&dir.path().join("config.toml")).unwrap();
    assert_eq!(again, cfg);

    // checkpoint -> evaluate, twice
    let ck = dir.path().join("checkpoints/final.ckpt");
    let e1 = evaluate_checkpoint(&ck, &cfg).unwrap();
    let e2 = evaluate_checkpoint(&ck, &cfg).unwrap();
    assert_eq!(e1, e2);
    assert_eq!(e1.summary, summary.final_test);

    // report aggregation reads the summary back
    let found = find_summaries(dir.path()).unwrap();
    assert_eq!(found.len(), 1);
    let rows = aggregate(&[load_summary(&found[0]).unwrap()], 0.1);
    assert_eq!(rows[0].label, "egpo");
}

#[test]
fn checkpoint_for_another_layout_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(Method::Sac);
    let agent = Agent::<f32>::new(cfg.env.obs_dim(), cfg.learner.clone(), 1).unwrap();
    let ck = dir.path().join("a.ckpt");
    agent.save(&ck, serde_json::json!({})).unwrap();
    let mut other = cfg.clone();
    other.env.n_rays += 4;
    assert!(evaluate_checkpoint(&ck, &other).is_err());
    assert!(evaluate_checkpoint(&ck, &cfg).is_ok());
}

#[test]
fn baselines_and_ablations_run() {
    let mut lag = small(Method::SacLag);
    lag.ablation.no_pid = true;
    let (_, s) = train(&lag, None).unwrap();
    assert!(s.records.iter().all(|r| r.check().is_ok()));
    for abl in ["rule_switch", "no_pid", "no_cql", "zero_env_reward"] {
        let mut c = small(Method::Egpo);
        c.total_env_steps = 1200;
        c.ablation.set(abl).unwrap();
        let (agent, s) = train(&c, None).unwrap();
        assert!(agent.all_finite(), "{abl}");
        assert!(s.label.contains(abl));
    }
}

#[test]
fn untrained_policy_does_not_reach_the_goal() {
    let cfg = small(Method::Sac);
    let agent = Agent::<f32>::new(cfg.env.obs_dim(), cfg.learner.clone(), 11).unwrap();
    let scenes = build_scenes(&cfg.env, &SeedRange { start: 1000, count: 10 });
    let ev = egpo_core::harness::evaluate_policy(&agent.policy, &cfg.env, &scenes, 10).unwrap();
    assert!(ev.summary.success_rate <= 0.1, "{:?}", ev.summary);
}

#[test]
fn expert_calibration_gate() {
    let cfg = RunConfig::default();
    let expert = ExpertPolicy::new(ExpertConfig::default()).unwrap();
    let scenes = build_scenes(&cfg.env, &SeedRange { start: 1000, count: 50 });
    let ev = evaluate_expert(&expert, &cfg.env, &scenes, 50, 0).unwrap();
    assert!(ev.summary.success_rate >= 0.9, "{:?}", ev.summary);
}

#[test]
fn dataset_step_cost_matches_failure_estimate() {
    let cfg = RunConfig::default();
    let expert_cfg = ExpertConfig::with_quality(0.3);
    let range = SeedRange { start: 0, count: 40 };
    let ds = collect_dataset(&cfg.env, &range, &expert_cfg, 20_000, 5).unwrap();
    let n = ds.transitions.len() as f64;
    let p_ds = ds.unsafe_step_rate();
    let mean_cost = ds.transitions.iter().map(|t| t.cost as f64).sum::<f64>() / n;

    let expert = ExpertPolicy::new(expert_cfg).unwrap();
    let scenes = build_scenes(&cfg.env, &range);
    let est = expert
        .estimate_failure_rate(&cfg.env, &scenes, 100, &mut rng::derive(77, 1))
        .unwrap();
    let p = est.epsilon;
    assert!(p > 0.0);
    let se = (p * (1.0 - p) / n + p * (1.0 - p) / est.steps as f64).sqrt();
    assert!((p_ds - p).abs() < 3.0 * se, "dataset {p_ds}, estimate {p}, se {se}");
    // a step never costs more than a collision plus a road exit
    assert!(mean_cost >= p_ds && mean_cost <= 3.0 * p_ds);
}

#[test]
fn offline_methods_from_a_dataset_file() {
    let dir = tempfile::tempdir().unwrap();
    let base = small(Method::Bc);
    let ds = collect_dataset(&base.env, &base.train_scenes, &base.expert, 3000, 2).unwrap();
    let path = dir.path().join("demo.jsonl");
    ds.save(&path).unwrap();

    let mut bc = base.clone();
    bc.dataset = Some(path.clone());
    bc.bc_epochs = 3;
    let (_, s) = run(&bc, Some(&dir.path().join("bc"))).unwrap();
    assert_eq!(s.test_records().count(), 1);
    assert!(dir.path().join("bc/bc_report.json").exists());

    let mut cql = base.clone();
    cql.method = Method::CqlOffline;
    cql.dataset = Some(path);
    cql.offline_updates = 300;
    cql.eval_every = 100;
    let (agent, s) = run(&cql, Some(&dir.path().join("cql"))).unwrap();
    assert_eq!(agent.updates, 300);
    assert_eq!(s.test_records().count(), 3);
    assert!(agent.all_finite());
}

#[test]
fn bc_held_in_loss_descends() {
    use egpo_core::harness::{run_bc, BcOptions};
    let cfg = small(Method::Bc);
    let ds = collect_dataset(&cfg.env, &cfg.train_scenes, &cfg.expert, 2000, 4).unwrap();
    let opts = BcOptions {
        epochs: 30,
        batch_size: 64,
        learning_rate: 1e-3,
        validation_fraction: 0.1,
        learner: cfg.learner.clone(),
    };
    let (_, rep) = run_bc(&ds.transitions, &opts, 0).unwrap();
    let ma: Vec<f64> = rep.heldin_loss.windows(5).map(|w| w.iter().sum::<f64>() / 5.0).collect();
    for w in ma.windows(2) {
        assert!(w[1] <= w[0] + 1e-3 * w[0].abs().max(1.0), "{ma:?}");
    }
    assert!(rep.heldin_loss.last().unwrap() < &rep.heldin_loss[0]);
    assert!(rep.validation_loss.is_finite());
}
