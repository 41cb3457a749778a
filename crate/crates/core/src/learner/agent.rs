use std::path::Path;

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use super::buffer::{Batch, ReplayBuffer};
use super::lagrangian::{LagrangianState, LambdaMode, PidGains};
use super::losses::{actor_loss, cql_loss, penalty_loss, td_loss, td_targets};
use crate::nn::dist::EDGE;
use crate::nn::policy::standard_normal;
use crate::nn::{Activation, Adam, AdamConfig, Checkpoint, Graph, PolicyHead, QNetwork, Real, SquashedGaussian};
use crate::rng::{self, Rng, Stream};
use crate::{Error, Result};

/// Which stored action a critic is regressed on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionSource {
    Agent,
    Applied,
}

/// Signal the constraint critic estimates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Constraint {
    /// Guardian takeovers.
    Intervention,
    /// Environment collision cost.
    EnvCost,
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearnerConfig {
    pub gamma: f64,
    pub tau: f64,
    pub alpha: f64,
    pub beta: f64,
    /// Limit `C` on the episodic constraint signal.
    pub intervention_limit: f64,
    pub kp: f64,
    pub ki: f64,
    pub kd: f64,
    /// Windup clamp as a multiple of the limit.
    pub integral_limit_factor: f64,
    pub learning_rate: f64,
    pub warmup_steps: usize,
    pub batch_size: usize,
    pub demo_batch_size: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub cql_policy_samples: usize,
    pub updates_per_step: f64,
    pub critic_action: ActionSource,
    pub qc_action: ActionSource,
    pub constraint: Constraint,
    pub lambda_mode: LambdaMode,
    /// Use the discounted episodic signal for the violation.
    pub discount_delta: bool,
    pub buffer_capacity: usize,
}

impl Default for LearnerConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            tau: 0.005,
            alpha: 0.2,
            beta: 3.0,
            intervention_limit: 20.0,
            kp: 5.0,
            ki: 0.01,
            kd: 0.1,
            integral_limit_factor: 10.0,
            learning_rate: 1e-4,
            warmup_steps: 10_000,
            batch_size: 256,
            demo_batch_size: 128,
            hidden: vec![256, 256],
            activation: Activation::Tanh,
            cql_policy_samples: 4,
            updates_per_step: 1.0,
            critic_action: ActionSource::Applied,
            qc_action: ActionSource::Agent,
            constraint: Constraint::Intervention,
            lambda_mode: LambdaMode::Pid,
            discount_delta: false,
            buffer_capacity: 1_000_000,
        }
    }
}

impl LearnerConfig {
    pub fn gains(&self) -> PidGains {
        PidGains::new(
            self.kp,
            self.ki,
            self.kd,
            self.integral_limit_factor * self.intervention_limit,
        )
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(0.0..1.0).contains(&self.gamma) {
            return bad("gamma must be in [0, 1)");
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return bad("tau must be in [0, 1]");
        }
        if self.alpha < 0.0 || self.beta < 0.0 || self.learning_rate <= 0.0 {
            return bad("alpha, beta must be >= 0 and learning_rate > 0");
        }
        if self.batch_size == 0 || self.cql_policy_samples == 0 || self.buffer_capacity == 0 {
            return bad("batch_size, cql_policy_samples and buffer_capacity must be positive");
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return bad("hidden layer sizes must be positive");
        }
        if !(self.updates_per_step >= 0.0 && self.updates_per_step.is_finite()) {
            return bad("updates_per_step must be finite and >= 0");
        }
        if let LambdaMode::Fixed(v) = self.lambda_mode {
            if v < 0.0 {
                return bad("fixed lambda must be >= 0");
            }
        }
        Ok(())
    }
}

/// Scalars from one gradient step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateMetrics {
    pub critic_loss: f64,
    /// `mean Q(s, a_expert) - mean Q(s, a_policy)` over the demonstration batch.
    pub cql_gap: f64,
    pub actor_loss: f64,
    pub qc_loss: f64,
    pub penalty: f64,
    pub q_mean: f64,
    pub skipped: u32,
}

/// Averages over one training iteration plus multiplier state.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IterationMetrics {
    pub critic_loss: f64,
    pub cql_gap: f64,
    pub actor_loss: f64,
    pub qc_loss: f64,
    pub lambda: f64,
    pub delta: f64,
    pub updates: usize,
    pub skipped: u32,
    pub buffer_len: usize,
    pub takeover_len: usize,
}

#[derive(Clone, Debug)]
pub struct Agent<F: Real> {
    pub cfg: LearnerConfig,
    pub policy: PolicyHead<F>,
    pub q1: QNetwork<F>,
    pub q2: QNetwork<F>,
    pub q1_target: QNetwork<F>,
    pub q2_target: QNetwork<F>,
    pub qc: QNetwork<F>,
    pub qc_target: QNetwork<F>,
    pub lagrangian: LagrangianState,
    pub updates: u64,
    pi_opt: Adam<F>,
    q1_opt: Adam<F>,
    q2_opt: Adam<F>,
    qc_opt: Adam<F>,
    update_rng: Rng,
    cql_rng: Rng,
    qc_rng: Rng,
    replay_rng: Rng,
}

fn rows_f64<F: Real>(a: &Array2<F>) -> f64 {
    if a.is_empty() {
        0.0
    } else {
        a.iter().map(|v| v.as_f64()).sum::<f64>() / a.len() as f64
    }
}

fn repeat_rows<F: Real>(a: &Array2<F>, k: usize) -> Array2<F> {
    let views: Vec<_> = (0..k).map(|_| a.view()).collect();
    ndarray::concatenate(Axis(0), &views).expect("same widths")
}

fn min_arr<F: Real>(a: &Array2<F>, b: &Array2<F>) -> Array2<F> {
    let mut m = a.clone();
    m.zip_mut_with(b, |x, &y| *x = x.min(y));
    m
}

impl<F: Real> Agent<F> {
    pub fn new(obs_dim: usize, cfg: LearnerConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut init = rng::stream(seed, Stream::Init);
        let h = &cfg.hidden;
        let act = cfg.activation;
        let policy = PolicyHead::new(obs_dim, h, 2, act, &mut init);
        let q1 = QNetwork::new(obs_dim, h, 2, act, &mut init);
        let q2 = QNetwork::new(obs_dim, h, 2, act, &mut init);
        let qc = QNetwork::new(obs_dim, h, 2, act, &mut init);
        let adam = AdamConfig::with_lr(cfg.learning_rate);
        Ok(Self {
            pi_opt: Adam::new(adam, &policy.params),
            q1_opt: Adam::new(adam, q1.params()),
            q2_opt: Adam::new(adam, q2.params()),
            qc_opt: Adam::new(adam, qc.params()),
            q1_target: q1.clone(),
            q2_target: q2.clone(),
            qc_target: qc.clone(),
            policy,
            q1,
            q2,
            qc,
            lagrangian: LagrangianState::default(),
            updates: 0,
            update_rng: rng::stream(seed, Stream::Update),
            cql_rng: rng::stream(seed, Stream::Cql),
            qc_rng: rng::stream(seed, Stream::InterventionCritic),
            replay_rng: rng::stream(seed, Stream::Replay),
            cfg,
        })
    }

    pub fn obs_dim(&self) -> usize {
        self.policy.obs_dim()
    }

    pub fn lambda(&self) -> f64 {
        self.lagrangian.lambda
    }

    fn row(&self, obs: &[f32]) -> Array2<F> {
        Array2::from_shape_fn((1, obs.len()), |(_, j)| F::lit(obs[j] as f64))
    }

    /// Stochastic action for one observation.
    pub fn act<R: rand::Rng + ?Sized>(&self, obs: &[f32], rng: &mut R) -> Result<[f64; 2]> {
        let (a, _) = self.policy.sample_array(&self.row(obs), rng)?;
        Ok([a[[0, 0]].as_f64(), a[[0, 1]].as_f64()])
    }

    /// Mean action, used for evaluation.
    pub fn act_deterministic(&self, obs: &[f32]) -> Result<[f64; 2]> {
        let a = self.policy.deterministic_action(&self.row(obs))?;
        let e = EDGE;
        Ok([a[[0, 0]].as_f64().clamp(-e, e), a[[0, 1]].as_f64().clamp(-e, e)])
    }

    pub fn distribution(&self, obs: &[f32]) -> Result<SquashedGaussian> {
        let o: Vec<f64> = obs.iter().map(|v| *v as f64).collect();
        self.policy.distribution(&o)
    }

    /// Number of gradient steps owed after `env_steps` total steps, given
    /// `done_updates` already performed.
    pub fn updates_due(&self, env_steps: usize) -> usize {
        if env_steps < self.cfg.warmup_steps {
            return 0;
        }
        let owed = ((env_steps - self.cfg.warmup_steps) as f64 * self.cfg.updates_per_step).floor() as u64;
        owed.saturating_sub(self.updates) as usize
    }

    /// One gradient step of every network followed by the target updates.
    pub fn update(&mut self, buffer: &ReplayBuffer) -> Result<UpdateMetrics> {
        let batch: Batch<F> = buffer.sample(self.cfg.batch_size, &mut self.replay_rng)?;
        let demo: Batch<F> = if self.cfg.beta > 0.0 && self.cfg.demo_batch_size > 0 {
            buffer.sample_demo(self.cfg.demo_batch_size, &mut self.replay_rng)
        } else {
            buffer.gather(Vec::new())
        };
        self.update_on(&batch, &demo)
    }

    /// [`Agent::update`] on explicit batches.
    pub fn update_on(&mut self, batch: &Batch<F>, demo: &Batch<F>) -> Result<UpdateMetrics> {
        if batch.is_empty() {
            return Err(Error::EmptyBatch("Agent::update"));
        }
        let mut m = UpdateMetrics::default();
        self.critic_step(batch, demo, &mut m)?;
        if self.cfg.constraint != Constraint::None {
            self.qc_step(batch, &mut m)?;
        }
        self.actor_step(batch, &mut m)?;
        let tau = F::lit(self.cfg.tau);
        self.q1_target.params_mut().polyak_from(self.q1.params(), tau)?;
        self.q2_target.params_mut().polyak_from(self.q2.params(), tau)?;
        if self.cfg.constraint != Constraint::None {
            self.qc_target.params_mut().polyak_from(self.qc.params(), tau)?;
        }
        self.updates += 1;
        Ok(m)
    }

    fn critic_step(&mut self, batch: &Batch<F>, demo: &Batch<F>, m: &mut UpdateMetrics) -> Result<()> {
        let cfg = &self.cfg;
        let (a_next, lp_next) = self.policy.sample_array(&batch.next_obs, &mut self.update_rng)?;
        let q_next = min_arr(
            &self.q1_target.forward_array(&batch.next_obs, &a_next)?,
            &self.q2_target.forward_array(&batch.next_obs, &a_next)?,
        );
        let y = td_targets(&batch.reward, &batch.done, cfg.gamma, &q_next, Some(&lp_next), cfg.alpha);
        let act = match cfg.critic_action {
            ActionSource::Applied => &batch.applied_action,
            ActionSource::Agent => &batch.agent_action,
        };

        let mut g = Graph::new();
        let h1 = self.q1.params().bind(&mut g, true);
        let h2 = self.q2.params().bind(&mut g, true);
        let obs = g.constant(batch.obs.clone());
        let a = g.constant(act.clone());
        let q1 = self.q1.forward(&mut g, &h1, obs, a)?;
        let q2 = self.q2.forward(&mut g, &h2, obs, a)?;
        m.q_mean = 0.5 * (rows_f64(g.value(q1)) + rows_f64(g.value(q2)));
        let td1 = td_loss(&mut g, q1, &y)?;
        let td2 = td_loss(&mut g, q2, &y)?;
        let (l1, l2) = if cfg.beta > 0.0 && !demo.is_empty() {
            let k = cfg.cql_policy_samples;
            let o_rep = repeat_rows(&demo.obs, k);
            let (a_pi, _) = self.policy.sample_array(&o_rep, &mut self.cql_rng)?;
            let mean = repeat_rows(&demo.expert_mean, k);
            let std = repeat_rows(&demo.expert_std, k);
            let xi: Array2<F> = standard_normal(mean.dim(), &mut self.cql_rng);
            let edge = F::lit(EDGE);
            let mut a_e = mean;
            ndarray::Zip::from(&mut a_e)
                .and(&std)
                .and(&xi)
                .for_each(|a, &s, &x| *a = (*a + s * x).tanh().max(-edge).min(edge));
            let o = g.constant(o_rep);
            let ap = g.constant(a_pi);
            let ae = g.constant(a_e);
            let q1p = self.q1.forward(&mut g, &h1, o, ap)?;
            let q1e = self.q1.forward(&mut g, &h1, o, ae)?;
            let q2p = self.q2.forward(&mut g, &h2, o, ap)?;
            let q2e = self.q2.forward(&mut g, &h2, o, ae)?;
            m.cql_gap = 0.5
                * (rows_f64(g.value(q1e)) - rows_f64(g.value(q1p)) + rows_f64(g.value(q2e))
                    - rows_f64(g.value(q2p)));
            (
                cql_loss(&mut g, cfg.beta, Some(q1p), Some(q1e), td1)?,
                cql_loss(&mut g, cfg.beta, Some(q2p), Some(q2e), td2)?,
            )
        } else {
            (td1, td2)
        };
        let total = g.add(l1, l2)?;
        let loss = g.scalar(total).as_f64();
        m.critic_loss = 0.5 * loss;
        if !loss.is_finite() {
            m.skipped += 1;
            return Ok(());
        }
        let mut grads = g.backward(total)?;
        let g1 = grads.collect(&h1);
        let g2 = grads.collect(&h2);
        let r1 = self.q1_opt.step(self.q1.params_mut(), &g1);
        let r2 = self.q2_opt.step(self.q2.params_mut(), &g2);
        for r in [r1, r2] {
            match r {
                Ok(()) => {}
                Err(Error::NonFinite(_)) => m.skipped += 1,
                Err(e) => return Err(e),
            }
        }
        Ok(())
    }

    fn qc_step(&mut self, batch: &Batch<F>, m: &mut UpdateMetrics) -> Result<()> {
        let cfg = &self.cfg;
        let (a_next, _) = self.policy.sample_array(&batch.next_obs, &mut self.qc_rng)?;
        let q_next = self.qc_target.forward_array(&batch.next_obs, &a_next)?;
        let signal = match cfg.constraint {
            Constraint::EnvCost => &batch.cost,
            _ => &batch.intervention,
        };
        let y = td_targets(signal, &batch.done, cfg.gamma, &q_next, None, 0.0);
        let act = match cfg.qc_action {
            ActionSource::Applied => &batch.applied_action,
            ActionSource::Agent => &batch.agent_action,
        };
        let mut g = Graph::new();
        let h = self.qc.params().bind(&mut g, true);
        let obs = g.constant(batch.obs.clone());
        let a = g.constant(act.clone());
        let q = self.qc.forward(&mut g, &h, obs, a)?;
        let loss = td_loss(&mut g, q, &y)?;
        m.qc_loss = g.scalar(loss).as_f64();
        if !m.qc_loss.is_finite() {
            m.skipped += 1;
            return Ok(());
        }
        let mut grads = g.backward(loss)?;
        let gr = grads.collect(&h);
        match self.qc_opt.step(self.qc.params_mut(), &gr) {
            Ok(()) => Ok(()),
            Err(Error::NonFinite(_)) => {
                m.skipped += 1;
                Ok(())
            }
            Err(e) => Err(e),
        }
    }

    fn actor_step(&mut self, batch: &Batch<F>, m: &mut UpdateMetrics) -> Result<()> {
        let cfg = &self.cfg;
        let lambda = self.lagrangian.lambda;
        let xi: Array2<F> = standard_normal((batch.len(), 2), &mut self.update_rng);
        let mut g = Graph::new();
        let hp = self.policy.params.bind(&mut g, true);
        let h1 = self.q1.params().bind(&mut g, false);
        let h2 = self.q2.params().bind(&mut g, false);
        let obs = g.constant(batch.obs.clone());
        let s = self.policy.sample(&mut g, &hp, obs, xi)?;
        let q1 = self.q1.forward(&mut g, &h1, obs, s.action)?;
        let q2 = self.q2.forward(&mut g, &h2, obs, s.action)?;
        let q = g.min(q1, q2)?;
        let mut loss = actor_loss(&mut g, q, s.log_prob, cfg.alpha)?;
        m.actor_loss = g.scalar(loss).as_f64();
        if lambda > 0.0 && cfg.constraint != Constraint::None {
            let hc = self.qc.params().bind(&mut g, false);
            let qc = self.qc.forward(&mut g, &hc, obs, s.action)?;
            let pen = penalty_loss(&mut g, qc, cfg.intervention_limit);
            m.penalty = g.scalar(pen).as_f64();
            let weighted = g.scale(pen, F::lit(lambda));
            loss = g.add(loss, weighted)?;
        }
        if !g.scalar(loss).as_f64().is_finite() {
            m.skipped += 1;
            return Ok(());
        }
        let mut grads = g.backward(loss)?;
        let gp = grads.collect(&hp);
        match self.pi_opt.step(&mut self.policy.params, &gp) {
            Ok(()) => Ok(()),
            Err(Error::NonFinite(_)) => {
                m.skipped += 1;
                Ok(())
            }
            Err(e) => Err(e),
        }
    }

    /// Run `n_updates` gradient steps, then one multiplier update with the
    /// violation `delta` (the previous one is reused when `None`).
    pub fn train_iteration(
        &mut self,
        buffer: &ReplayBuffer,
        n_updates: usize,
        delta: Option<f64>,
    ) -> Result<IterationMetrics> {
        let mut out = IterationMetrics::default();
        for _ in 0..n_updates {
            let m = self.update(buffer)?;
            out.critic_loss += m.critic_loss;
            out.cql_gap += m.cql_gap;
            out.actor_loss += m.actor_loss;
            out.qc_loss += m.qc_loss;
            out.skipped += m.skipped;
        }
        if n_updates > 0 {
            let k = n_updates as f64;
            out.critic_loss /= k;
            out.cql_gap /= k;
            out.actor_loss /= k;
            out.qc_loss /= k;
        }
        let d = delta.unwrap_or(self.lagrangian.prev_delta);
        let gains = self.cfg.gains();
        self.lagrangian.update(d, &gains, self.cfg.lambda_mode);
        out.updates = n_updates;
        out.lambda = self.lagrangian.lambda;
        out.delta = d;
        out.buffer_len = buffer.len();
        out.takeover_len = buffer.takeover_len();
        Ok(out)
    }

    pub fn all_finite(&self) -> bool {
        self.policy.params.is_finite()
            && [&self.q1, &self.q2, &self.qc].iter().all(|q| q.params().is_finite())
            && self.lagrangian.lambda.is_finite()
    }

    pub fn to_checkpoint(&self, extra: serde_json::Value) -> Checkpoint {
        let meta = serde_json::json!({
            "kind": "agent",
            "obs_dim": self.obs_dim(),
            "learner": self.cfg,
            "lagrangian": self.lagrangian,
            "updates": self.updates,
            "extra": extra,
        });
        let mut ck = Checkpoint::new(meta);
        ck.add_params("policy", &self.policy.params);
        ck.add_params("q1", self.q1.params());
        ck.add_params("q2", self.q2.params());
        ck.add_params("q1_target", self.q1_target.params());
        ck.add_params("q2_target", self.q2_target.params());
        ck.add_params("qc", self.qc.params());
        ck.add_params("qc_target", self.qc_target.params());
        ck
    }

    pub fn save(&self, path: &Path, extra: serde_json::Value) -> Result<()> {
        self.to_checkpoint(extra).save(path)
    }

    /// Rebuild an agent from a checkpoint. Optimizer moments start fresh.
    pub fn from_checkpoint(ck: &Checkpoint, seed: u64) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if ck.meta.get("kind").and_then(|v| v.as_str()) != Some("agent") {
            return Err(bad("not an agent checkpoint"));
        }
        let obs_dim = ck
            .meta
            .get("obs_dim")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| bad("missing obs_dim"))? as usize;
        let cfg: LearnerConfig = serde_json::from_value(ck.meta["learner"].clone())?;
        let mut agent = Self::new(obs_dim, cfg, seed)?;
        agent.lagrangian = serde_json::from_value(ck.meta["lagrangian"].clone())?;
        agent.updates = ck.meta["updates"].as_u64().unwrap_or(0);
        ck.load_params("policy", &mut agent.policy.params)?;
        ck.load_params("q1", agent.q1.params_mut())?;
        ck.load_params("q2", agent.q2.params_mut())?;
        ck.load_params("q1_target", agent.q1_target.params_mut())?;
        ck.load_params("q2_target", agent.q2_target.params_mut())?;
        ck.load_params("qc", agent.qc.params_mut())?;
        ck.load_params("qc_target", agent.qc_target.params_mut())?;
        Ok(agent)
    }

    pub fn load(path: &Path, seed: u64) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?, seed)
    }
}
