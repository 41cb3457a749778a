use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::metrics::{EpisodeStats, EpisodeSummary, MetricsRecord, MetricsWriter, Split};
use super::rollout::{build_scenes, evaluate_policy, Chunk, EvalResult, RolloutContext, Worker};
use crate::expert::ExpertPolicy;
use crate::learner::{Agent, Constraint, IterationMetrics, ReplayBuffer};
use crate::{Error, Result};

/// What a finished run leaves behind besides its files.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub label: String,
    pub method: String,
    pub seed: u64,
    pub env_steps: usize,
    pub updates: u64,
    pub train_episodes: Vec<EpisodeStats>,
    pub final_test: EpisodeSummary,
    pub records: Vec<MetricsRecord>,
    pub final_lambda: f64,
}

impl RunSummary {
    pub fn mean_train_cost(&self) -> f64 {
        EpisodeSummary::of(&self.train_episodes).episodic_cost
    }

    /// Training episodes that ended inside `[lo, hi)` as fractions of the run.
    pub fn train_window(&self, lo: f64, hi: f64) -> EpisodeSummary {
        let n = self.env_steps as f64;
        let eps: Vec<_> = self
            .train_episodes
            .iter()
            .filter(|e| {
                let f = e.end_step as f64 / n;
                f > lo && f <= hi
            })
            .copied()
            .collect();
        EpisodeSummary::of(&eps)
    }

    pub fn test_records(&self) -> impl Iterator<Item = &MetricsRecord> {
        self.records.iter().filter(|r| r.split == Split::Test)
    }

    /// Mean of the test records in the final `frac` of the run.
    pub fn final_test_window(&self, frac: f64) -> EpisodeSummary {
        let cut = self.env_steps as f64 * (1.0 - frac);
        let recs: Vec<_> = self.test_records().filter(|r| r.step as f64 >= cut).collect();
        if recs.is_empty() {
            return self.final_test;
        }
        let n = recs.len() as f64;
        let m = |f: &dyn Fn(&MetricsRecord) -> f64| recs.iter().map(|r| f(r)).sum::<f64>() / n;
        EpisodeSummary {
            episodes: recs.iter().map(|r| r.episodes).sum(),
            episodic_return: m(&|r| r.episodic_return),
            episodic_cost: m(&|r| r.episodic_cost),
            success_rate: m(&|r| r.success_rate),
            intervention_frequency: m(&|r| r.intervention_frequency),
            mean_velocity: m(&|r| r.mean_velocity),
        }
    }
}

/// Files of a run directory.
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn create(root: &Path) -> Result<Self> {
        std::fs::create_dir_all(root.join("checkpoints"))?;
        Ok(Self {
            root: root.to_path_buf(),
        })
    }
    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics.jsonl")
    }
    pub fn config(&self) -> PathBuf {
        self.root.join("config.toml")
    }
    pub fn summary(&self) -> PathBuf {
        self.root.join("summary.json")
    }
    pub fn checkpoint(&self, name: &str) -> PathBuf {
        self.root.join("checkpoints").join(format!("{name}.ckpt"))
    }
}

/// Violation fed to the multiplier: mean episodic constraint signal minus
/// the limit, over the given episodes.
fn violation(eps: &[EpisodeStats], constraint: Constraint, discounted: bool, limit: f64) -> Option<f64> {
    if constraint == Constraint::None {
        return Some(0.0);
    }
    if eps.is_empty() {
        return None;
    }
    let signal = |e: &EpisodeStats| match (constraint, discounted) {
        (Constraint::EnvCost, false) => e.cost,
        (Constraint::EnvCost, true) => e.discounted_cost,
        (_, false) => e.interventions,
        (_, true) => e.discounted_interventions,
    };
    Some(eps.iter().map(signal).sum::<f64>() / eps.len() as f64 - limit)
}

fn collect(workers: &mut [Worker], ctx: &RolloutContext<'_>, n: usize) -> Result<Vec<Chunk>> {
    let k = workers.len();
    let share = |w: usize| n / k + usize::from(w < n % k);
    if k == 1 {
        return Ok(vec![workers[0].run(ctx, n)?]);
    }
    std::thread::scope(|s| {
        let handles: Vec<_> = workers
            .iter_mut()
            .enumerate()
            .map(|(w, worker)| {
                let m = share(w);
                s.spawn(move || worker.run(ctx, m))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("rollout worker panicked"))
            .collect()
    })
}

fn with_losses(mut r: MetricsRecord, m: Option<&IterationMetrics>) -> MetricsRecord {
    if let Some(m) = m {
        r.critic_loss = Some(m.critic_loss);
        r.cql_gap = Some(m.cql_gap);
        r.actor_loss = Some(m.actor_loss);
        r.qc_loss = Some(m.qc_loss);
    }
    r
}

/// Online training for `egpo`, `sac`, `sac_rs` and `sac_lag`.
///
/// With `out` set, the run directory receives `config.toml`,
/// `metrics.jsonl`, checkpoints and `summary.json`.
pub fn train(cfg: &RunConfig, out: Option<&Path>) -> Result<(Agent<f32>, RunSummary)> {
    if !cfg.method.is_online() {
        return Err(Error::Config(format!(
            "method {} is offline; use run_bc or run_cql_offline",
            cfg.method.name()
        )));
    }
    let res = cfg.resolve()?;
    let dir = out.map(RunDir::create).transpose()?;
    let mut writer = match &dir {
        Some(d) => {
            std::fs::write(d.config(), cfg.to_toml())?;
            MetricsWriter::create(&d.metrics())?
        }
        None => MetricsWriter::memory(),
    };
    let train_scenes = build_scenes(&cfg.env, &cfg.train_scenes);
    let test_scenes = build_scenes(&cfg.env, &cfg.test_scenes);
    let expert = ExpertPolicy::new(cfg.expert.clone())?;
    let obs_dim = cfg.env.obs_dim();
    let mut agent = Agent::<f32>::new(obs_dim, res.learner.clone(), cfg.seed)?;
    let capacity = res.learner.buffer_capacity.min(cfg.total_env_steps.max(1));
    let mut buffer = ReplayBuffer::new(capacity, obs_dim)?;
    let mut workers: Vec<Worker> = (0..cfg.workers)
        .map(|w| Worker::new(&cfg.env, &train_scenes, cfg.seed, w))
        .collect();

    let constraint = res.learner.constraint;
    let mut summary = RunSummary {
        label: cfg.label(),
        method: cfg.method.name().into(),
        seed: cfg.seed,
        ..Default::default()
    };
    let mut pending: Vec<EpisodeStats> = vec![];
    let mut since_record: Vec<EpisodeStats> = vec![];
    let mut last_iter: Option<IterationMetrics> = None;
    let mut last_delta = 0.0;
    let mut step = 0usize;
    let mut next_eval = cfg.eval_every;
    let mut next_ckpt = if cfg.checkpoint_every > 0 { cfg.checkpoint_every } else { usize::MAX };
    let meta = |step: usize| serde_json::json!({ "step": step, "label": cfg.label(), "seed": cfg.seed });

    while step < cfg.total_env_steps {
        let n = cfg.iteration_steps.min(cfg.total_env_steps - step);
        let snapshot = agent.policy.clone();
        let ctx = RolloutContext {
            policy: &snapshot,
            expert: &expert,
            guardian: &res.guardian,
            shaping: res.shaping,
            query_expert: res.query_expert,
            gamma: res.learner.gamma,
            scenes: &train_scenes,
        };
        let chunks = collect(&mut workers, &ctx, n)?;
        for chunk in chunks {
            for t in &chunk.transitions {
                buffer.push(t)?;
            }
            for mut e in chunk.episodes {
                e.end_step += step;
                pending.push(e);
                since_record.push(e);
                summary.train_episodes.push(e);
            }
        }
        step += n;

        if step >= res.learner.warmup_steps {
            let due = agent.updates_due(step);
            let delta = violation(&pending, constraint, res.learner.discount_delta, res.learner.intervention_limit);
            let m = agent.train_iteration(&buffer, due, delta)?;
            last_delta = m.delta;
            last_iter = Some(m);
            pending.clear();
            if !agent.all_finite() {
                if let Some(d) = &dir {
                    agent.save(&d.checkpoint("diverged"), meta(step))?;
                }
                return Err(Error::NonFinite(format!("training state at step {step}")));
            }
        }

        while step >= next_eval {
            let train_rec = EpisodeSummary::of(&since_record).record(step, Split::Train, agent.lambda(), last_delta);
            writer.push(with_losses(train_rec, last_iter.as_ref()))?;
            since_record.clear();
            let ev = evaluate_policy(&agent.policy, &cfg.env, &test_scenes, cfg.eval_episodes)?;
            writer.push(ev.summary.record(step, Split::Test, agent.lambda(), last_delta))?;
            summary.final_test = ev.summary;
            next_eval += cfg.eval_every;
        }
        if step >= next_ckpt {
            if let Some(d) = &dir {
                agent.save(&d.checkpoint(&format!("step_{step}")), meta(step))?;
            }
            next_ckpt += cfg.checkpoint_every;
        }
    }

    if writer.records.last().map(|r| r.step) != Some(step) {
        let ev = evaluate_policy(&agent.policy, &cfg.env, &test_scenes, cfg.eval_episodes)?;
        let train_rec = EpisodeSummary::of(&since_record).record(step, Split::Train, agent.lambda(), last_delta);
        writer.push(with_losses(train_rec, last_iter.as_ref()))?;
        writer.push(ev.summary.record(step, Split::Test, agent.lambda(), last_delta))?;
        summary.final_test = ev.summary;
    }
    summary.env_steps = step;
    summary.updates = agent.updates;
    summary.final_lambda = agent.lambda();
    summary.records = writer.records.clone();
    if let Some(d) = &dir {
        agent.save(&d.checkpoint("final"), meta(step))?;
        std::fs::write(d.summary(), serde_json::to_string_pretty(&summary)?)?;
    }
    Ok((agent, summary))
}

/// Load a checkpoint and evaluate it with the guardian off.
pub fn evaluate_checkpoint(path: &Path, cfg: &RunConfig) -> Result<EvalResult> {
    let agent = Agent::<f32>::load(path, cfg.seed)?;
    if agent.obs_dim() != cfg.env.obs_dim() {
        return Err(Error::Checkpoint(format!(
            "checkpoint expects {} observation features, environment produces {}",
            agent.obs_dim(),
            cfg.env.obs_dim()
        )));
    }
    let scenes = build_scenes(&cfg.env, &cfg.test_scenes);
    evaluate_policy(&agent.policy, &cfg.env, &scenes, cfg.eval_episodes)
}
