//! Behavior cloning and offline CQL on a demonstration dataset.

use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::config::{Method, RunConfig};
use super::dataset::DemoDataset;
use super::metrics::{EpisodeSummary, MetricsWriter, Split};
use super::rollout::{build_scenes, evaluate_policy};
use super::train::{RunDir, RunSummary};
use crate::learner::losses::gaussian_nll;
use crate::learner::{Agent, LearnerConfig, Transition};
use crate::nn::dist::EDGE;
use crate::nn::{Adam, AdamConfig, Graph, PolicyHead};
use crate::rng::{self, Stream};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct BcOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Tail fraction of the dataset held out for validation.
    pub validation_fraction: f64,
    /// Network shape (and seed handling) shared with the online agent.
    pub learner: LearnerConfig,
}

impl BcOptions {
    pub fn from_run(cfg: &RunConfig) -> Self {
        Self {
            epochs: cfg.bc_epochs,
            batch_size: cfg.learner.batch_size,
            learning_rate: cfg.learner.learning_rate,
            validation_fraction: 0.1,
            learner: cfg.learner.clone(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BcReport {
    /// Mean minibatch loss per epoch.
    pub epoch_loss: Vec<f64>,
    /// Loss on a fixed batch of training rows after every epoch.
    pub heldin_loss: Vec<f64>,
    pub validation_loss: f64,
}

fn rows(ts: &[&Transition]) -> (Array2<f32>, Array2<f32>) {
    let d = ts[0].obs.len();
    let obs = Array2::from_shape_fn((ts.len(), d), |(i, j)| ts[i].obs[j]);
    let u = Array2::from_shape_fn((ts.len(), 2), |(i, j)| {
        (ts[i].applied_action[j] as f64).clamp(-EDGE, EDGE).atanh() as f32
    });
    (obs, u)
}

fn nll(policy: &PolicyHead<f32>, obs: &Array2<f32>, u: &Array2<f32>) -> Result<f64> {
    let mut g = Graph::new();
    let h = policy.params.bind(&mut g, false);
    let o = g.constant(obs.clone());
    let (mean, log_std) = policy.forward(&mut g, &h, o)?;
    let l = gaussian_nll(&mut g, mean, log_std, u)?;
    Ok(g.scalar(l) as f64)
}

/// Maximise the likelihood of the applied actions under the policy head.
/// Only the policy of the returned agent is trained.
pub fn run_bc(data: &[Transition], opts: &BcOptions, seed: u64) -> Result<(Agent<f32>, BcReport)> {
    if data.is_empty() {
        return Err(Error::EmptyBatch("run_bc"));
    }
    let obs_dim = data[0].obs.len();
    let mut agent = Agent::<f32>::new(obs_dim, opts.learner.clone(), seed)?;
    let n_val = ((data.len() as f64 * opts.validation_fraction).floor() as usize).min(data.len() - 1);
    let (train, val) = data.split_at(data.len() - n_val);
    let train: Vec<&Transition> = train.iter().collect();
    let held: Vec<&Transition> = train.iter().take(256).copied().collect();
    let (held_obs, held_u) = rows(&held);
    let mut opt = Adam::new(AdamConfig::with_lr(opts.learning_rate), &agent.policy.params);
    let mut r = rng::stream(seed, Stream::Update);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut report = BcReport::default();
    let bs = opts.batch_size.max(1);
    for _ in 0..opts.epochs {
        order.shuffle(&mut r);
        let mut total = 0.0;
        let mut count = 0;
        for chunk in order.chunks(bs) {
            let batch: Vec<&Transition> = chunk.iter().map(|&i| train[i]).collect();
            let (obs, u) = rows(&batch);
            let mut g = Graph::new();
            let h = agent.policy.params.bind(&mut g, true);
            let o = g.constant(obs);
            let (mean, log_std) = agent.policy.forward(&mut g, &h, o)?;
            let l = gaussian_nll(&mut g, mean, log_std, &u)?;
            total += g.scalar(l) as f64;
            count += 1;
            let grads = g.backward(l)?.collect(&h);
            match opt.step(&mut agent.policy.params, &grads) {
                Ok(()) | Err(Error::NonFinite(_)) => {}
                Err(e) => return Err(e),
            }
        }
        report.epoch_loss.push(total / count as f64);
        report.heldin_loss.push(nll(&agent.policy, &held_obs, &held_u)?);
    }
    report.validation_loss = if val.is_empty() {
        f64::NAN
    } else {
        let v: Vec<&Transition> = val.iter().collect();
        let (o, u) = rows(&v);
        nll(&agent.policy, &o, &u)?
    };
    Ok((agent, report))
}

/// Offline CQL: the whole dataset is both the replay buffer and the
/// demonstration buffer. `offline_updates` gradient steps, evaluated every
/// `eval_every` steps.
pub fn run_cql_offline(
    data: &DemoDataset,
    cfg: &RunConfig,
    writer: &mut MetricsWriter,
) -> Result<Agent<f32>> {
    let res = cfg.resolve()?;
    let buffer = data.to_buffer()?;
    let mut agent = Agent::<f32>::new(buffer.obs_dim(), res.learner, cfg.seed)?;
    let scenes = build_scenes(&cfg.env, &cfg.test_scenes);
    let mut done = 0;
    while done < cfg.offline_updates {
        let n = cfg.eval_every.min(cfg.offline_updates - done);
        agent.train_iteration(&buffer, n, Some(0.0))?;
        done += n;
        if !agent.all_finite() {
            return Err(Error::NonFinite(format!("offline critic after {done} updates")));
        }
        let ev = evaluate_policy(&agent.policy, &cfg.env, &scenes, cfg.eval_episodes)?;
        writer.push(ev.summary.record(done, Split::Test, 0.0, 0.0))?;
    }
    Ok(agent)
}

/// Offline entry point used by the CLI: `bc` or `cql_offline` from
/// `cfg.dataset`, writing the same run-directory layout as online training.
pub fn train_offline(cfg: &RunConfig, out: Option<&Path>) -> Result<(Agent<f32>, RunSummary)> {
    let path = cfg
        .dataset
        .as_ref()
        .ok_or_else(|| Error::Config("offline methods need `dataset`".into()))?;
    let data = DemoDataset::load(path)?;
    if data.header.env.obs_dim() != cfg.env.obs_dim() {
        return Err(Error::Config("dataset observation layout differs from the run's environment".into()));
    }
    let dir = out.map(RunDir::create).transpose()?;
    let mut writer = match &dir {
        Some(d) => {
            std::fs::write(d.config(), cfg.to_toml())?;
            MetricsWriter::create(&d.metrics())?
        }
        None => MetricsWriter::memory(),
    };
    let agent = match cfg.method {
        Method::Bc => {
            let (agent, report) = run_bc(&data.transitions, &BcOptions::from_run(cfg), cfg.seed)?;
            let scenes = build_scenes(&cfg.env, &cfg.test_scenes);
            let ev = evaluate_policy(&agent.policy, &cfg.env, &scenes, cfg.eval_episodes)?;
            writer.push(ev.summary.record(cfg.bc_epochs, Split::Test, 0.0, 0.0))?;
            if let Some(d) = &dir {
                std::fs::write(d.root.join("bc_report.json"), serde_json::to_string_pretty(&report)?)?;
            }
            agent
        }
        Method::CqlOffline => run_cql_offline(&data, cfg, &mut writer)?,
        m => return Err(Error::Config(format!("method {} is not offline", m.name()))),
    };
    let summary = RunSummary {
        label: cfg.label(),
        method: cfg.method.name().into(),
        seed: cfg.seed,
        env_steps: 0,
        updates: agent.updates,
        train_episodes: vec![],
        final_test: writer
            .records
            .last()
            .map(|r| EpisodeSummary {
                episodes: r.episodes,
                episodic_return: r.episodic_return,
                episodic_cost: r.episodic_cost,
                success_rate: r.success_rate,
                intervention_frequency: 0.0,
                mean_velocity: r.mean_velocity,
            })
            .unwrap_or_default(),
        records: writer.records.clone(),
        final_lambda: 0.0,
    };
    if let Some(d) = &dir {
        agent.save(&d.checkpoint("final"), serde_json::json!({ "label": cfg.label(), "seed": cfg.seed }))?;
        std::fs::write(d.summary(), serde_json::to_string_pretty(&summary)?)?;
    }
    Ok((agent, summary))
}
