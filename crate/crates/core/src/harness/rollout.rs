use ndarray::Array2;

use super::config::Shaping;
use super::metrics::{EpisodeStats, EpisodeSummary};
use crate::expert::ExpertPolicy;
use crate::guardian::{rule_switch, switch_with, GuardianConfig, GuardianMode, SwitchOutcome};
use crate::learner::Transition;
use crate::nn::PolicyHead;
use crate::rng::{self, Rng, Stream};
use crate::sim::{generate_scene, DrivingEnv, EnvConfig, SceneSpec, SeedRange};
use crate::Result;

pub fn build_scenes(env: &EnvConfig, range: &SeedRange) -> Vec<SceneSpec> {
    range.seeds().map(|s| generate_scene(s, &env.difficulty)).collect()
}

fn worker_stream(seed: u64, s: Stream, worker: usize) -> Rng {
    if worker == 0 {
        rng::stream(seed, s)
    } else {
        rng::derive(seed, s as u64 + 64 * worker as u64)
    }
}

#[derive(Clone, Debug, Default)]
struct EpisodeAcc {
    ret: f64,
    cost: f64,
    interventions: f64,
    disc_interventions: f64,
    disc_cost: f64,
    discount: f64,
    speed_sum: f64,
    steps: usize,
}

impl EpisodeAcc {
    fn new() -> Self {
        Self {
            discount: 1.0,
            ..Default::default()
        }
    }
}

/// Everything a worker needs besides its own state.
pub struct RolloutContext<'a> {
    pub policy: &'a PolicyHead<f32>,
    pub expert: &'a ExpertPolicy,
    pub guardian: &'a GuardianConfig,
    pub shaping: Shaping,
    pub query_expert: bool,
    pub gamma: f64,
    pub scenes: &'a [SceneSpec],
}

#[derive(Debug, Default)]
pub struct Chunk {
    pub transitions: Vec<Transition>,
    /// Episodes completed in this chunk, with `end_step` relative to its start.
    pub episodes: Vec<EpisodeStats>,
}

/// One training rollout worker with its own environment and random streams.
pub struct Worker {
    env: DrivingEnv,
    obs: Vec<f32>,
    explore: Rng,
    expert_rng: Rng,
    scene_rng: Rng,
    acc: EpisodeAcc,
}

impl Worker {
    pub fn new(env_cfg: &EnvConfig, scenes: &[SceneSpec], seed: u64, index: usize) -> Self {
        let mut scene_rng = worker_stream(seed, Stream::Scene, index);
        let first = pick(scenes, &mut scene_rng);
        let mut env = DrivingEnv::new(env_cfg.clone(), first);
        let obs = env.reset().to_f32();
        Self {
            env,
            obs,
            explore: worker_stream(seed, Stream::Explore, index),
            expert_rng: worker_stream(seed, Stream::Expert, index),
            scene_rng,
            acc: EpisodeAcc::new(),
        }
    }

    pub fn run(&mut self, ctx: &RolloutContext<'_>, n_steps: usize) -> Result<Chunk> {
        let mut out = Chunk::default();
        out.transitions.reserve(n_steps);
        let obs_dim = self.obs.len();
        for t in 0..n_steps {
            let row = Array2::from_shape_vec((1, obs_dim), self.obs.clone()).expect("row shape");
            let (a, _) = ctx.policy.sample_array(&row, &mut self.explore)?;
            let agent = [a[[0, 0]] as f64, a[[0, 1]] as f64];
            let env_ctx = self.env.context();
            let dist = ctx.query_expert.then(|| ctx.expert.distribution(&env_ctx));
            let outcome = match ctx.guardian.mode {
                GuardianMode::Off => SwitchOutcome {
                    applied_action: agent,
                    intervention: false,
                    expert_sample_used: false,
                },
                GuardianMode::ExpertDensity => switch_with(
                    dist.as_ref().expect("expert queried when guardian is on"),
                    agent,
                    ctx.guardian.eta,
                    &mut self.expert_rng,
                ),
                GuardianMode::RuleBased => rule_switch(
                    &env_ctx,
                    agent,
                    ctx.expert,
                    &ctx.guardian.rule_thresholds,
                    &mut self.expert_rng,
                ),
            };
            let step = self.env.step(outcome.applied_action)?;
            let next_obs = step.observation.to_f32();
            let c_hat = outcome.cost();
            let f2 = |v: [f64; 2]| [v[0] as f32, v[1] as f32];
            let (em, es) = match &dist {
                Some(d) => ([d.mean[0], d.mean[1]], [d.std[0], d.std[1]]),
                None => ([0.0; 2], [0.0; 2]),
            };
            out.transitions.push(Transition {
                obs: std::mem::take(&mut self.obs),
                agent_action: f2(agent),
                applied_action: f2(outcome.applied_action),
                reward: ctx.shaping.apply(step.reward, step.cost as f64) as f32,
                cost: step.cost as f32,
                intervention: c_hat as f32,
                next_obs: next_obs.clone(),
                done: step.terminal(),
                takeover: outcome.intervention,
                expert_mean: f2(em),
                expert_std: f2(es),
            });
            let a = &mut self.acc;
            a.ret += step.reward;
            a.cost += step.cost as f64;
            a.interventions += c_hat;
            a.disc_interventions += a.discount * c_hat;
            a.disc_cost += a.discount * step.cost as f64;
            a.discount *= ctx.gamma;
            a.speed_sum += self.env.ego().speed;
            a.steps += 1;
            if step.done {
                out.episodes.push(EpisodeStats {
                    end_step: t + 1,
                    length: a.steps,
                    episodic_return: a.ret,
                    cost: a.cost,
                    interventions: a.interventions,
                    discounted_interventions: a.disc_interventions,
                    discounted_cost: a.disc_cost,
                    mean_velocity: a.speed_sum / a.steps as f64,
                    success: step.success(),
                });
                self.acc = EpisodeAcc::new();
                let scene = pick(ctx.scenes, &mut self.scene_rng);
                self.obs = self.env.reset_with(scene).to_f32();
            } else {
                self.obs = next_obs;
            }
        }
        Ok(out)
    }
}

fn pick(scenes: &[SceneSpec], r: &mut Rng) -> SceneSpec {
    use rand::Rng as _;
    scenes[r.random_range(0..scenes.len())].clone()
}

/// Result of running a fixed controller over a scene list.
#[derive(Clone, Debug, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EvalResult {
    pub summary: EpisodeSummary,
    pub episodes: Vec<EpisodeStats>,
}

/// Run `n_episodes` episodes, episode `i` on `scenes[i % len]`, without any
/// guardian. `act` sees the environment and the current observation.
pub fn evaluate_with(
    env_cfg: &EnvConfig,
    scenes: &[SceneSpec],
    n_episodes: usize,
    mut act: impl FnMut(&DrivingEnv, &[f32]) -> Result<[f64; 2]>,
) -> Result<EvalResult> {
    let mut episodes = Vec::with_capacity(n_episodes);
    if scenes.is_empty() {
        return Err(crate::Error::InvalidArgument("no evaluation scenes".into()));
    }
    let mut env = DrivingEnv::new(env_cfg.clone(), scenes[0].clone());
    for i in 0..n_episodes {
        let mut obs = env.reset_with(scenes[i % scenes.len()].clone()).to_f32();
        let mut acc = EpisodeAcc::new();
        loop {
            let a = act(&env, &obs)?;
            let step = env.step(a)?;
            acc.ret += step.reward;
            acc.cost += step.cost as f64;
            acc.speed_sum += env.ego().speed;
            acc.steps += 1;
            if step.done {
                episodes.push(EpisodeStats {
                    end_step: 0,
                    length: acc.steps,
                    episodic_return: acc.ret,
                    cost: acc.cost,
                    interventions: 0.0,
                    discounted_interventions: 0.0,
                    discounted_cost: 0.0,
                    mean_velocity: acc.speed_sum / acc.steps as f64,
                    success: step.success(),
                });
                break;
            }
            obs = step.observation.to_f32();
        }
    }
    Ok(EvalResult {
        summary: EpisodeSummary::of(&episodes),
        episodes,
    })
}

/// Deterministic evaluation of a policy head (mean action).
pub fn evaluate_policy(
    policy: &PolicyHead<f32>,
    env_cfg: &EnvConfig,
    scenes: &[SceneSpec],
    n_episodes: usize,
) -> Result<EvalResult> {
    let e = crate::nn::dist::EDGE;
    evaluate_with(env_cfg, scenes, n_episodes, |_, obs| {
        let row = Array2::from_shape_vec((1, obs.len()), obs.to_vec()).expect("row shape");
        let a = policy.deterministic_action(&row)?;
        Ok([
            (a[[0, 0]] as f64).clamp(-e, e),
            (a[[0, 1]] as f64).clamp(-e, e),
        ])
    })
}

/// Stochastic scripted expert on the same protocol.
pub fn evaluate_expert(
    expert: &ExpertPolicy,
    env_cfg: &EnvConfig,
    scenes: &[SceneSpec],
    n_episodes: usize,
    seed: u64,
) -> Result<EvalResult> {
    let mut r = rng::stream(seed, Stream::Eval);
    evaluate_with(env_cfg, scenes, n_episodes, |env, _| Ok(expert.sample(&env.context(), &mut r)))
}
