//! Scripted stochastic expert: pure-pursuit lane following with a lateral
//! avoidance offset, wrapped in a squashed Gaussian so that both sampling and
//! pointwise density queries are available.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::nn::SquashedGaussian;
use crate::sim::geometry::{norm, sub, wrap_angle};
use crate::sim::{DrivingContext, DrivingEnv, EnvConfig, SceneSpec};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExpertConfig {
    /// Pure-pursuit lookahead `base + time * speed`, metres.
    pub lookahead_base: f64,
    pub lookahead_time: f64,
    pub steer_gain: f64,
    pub target_speed: f64,
    pub speed_gain: f64,
    /// Obstacles further ahead than this are ignored.
    pub avoid_radius: f64,
    /// Extra lateral clearance kept around every disc.
    pub avoid_margin: f64,
    /// Arclength over which the avoidance offset fades in and out.
    pub avoid_ramp: f64,
    pub avoid_gain: f64,
    /// Speed cap `follow_gain * (gap - follow_gap)` behind a blocking disc.
    pub follow_gain: f64,
    pub follow_gap: f64,
    pub avoidance: bool,
    /// Pre-squash standard deviation for (steer, throttle) at quality 1.
    pub noise_scale: [f64; 2],
    /// In `[0, 1]`; scales the steering and avoidance gains by `quality` and
    /// the noise by `2 - quality`.
    pub quality: f64,
    /// The controller output is clipped to this magnitude before `atanh`.
    pub mean_clip: f64,
}

impl Default for ExpertConfig {
    fn default() -> Self {
        Self {
            lookahead_base: 4.0,
            lookahead_time: 0.3,
            steer_gain: 1.0,
            target_speed: 8.0,
            speed_gain: 0.5,
            avoid_radius: 18.0,
            avoid_margin: 0.8,
            avoid_ramp: 8.0,
            avoid_gain: 1.0,
            follow_gain: 0.8,
            follow_gap: 2.0,
            avoidance: true,
            noise_scale: [0.05, 0.15],
            quality: 1.0,
            mean_clip: 0.95,
        }
    }
}

impl ExpertConfig {
    pub fn with_quality(quality: f64) -> Self {
        Self {
            quality,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.quality) {
            return Err(Error::Config(format!("expert quality {} outside [0, 1]", self.quality)));
        }
        if !self.noise_scale.iter().all(|&s| s > 0.0 && s.is_finite()) {
            return Err(Error::Config("expert noise_scale must be positive".into()));
        }
        if !(self.mean_clip > 0.0 && self.mean_clip < 1.0) {
            return Err(Error::Config("expert mean_clip must lie in (0, 1)".into()));
        }
        Ok(())
    }

    /// Steering gain after the quality knob.
    pub fn effective_steer_gain(&self) -> f64 {
        self.steer_gain * self.quality
    }

    pub fn effective_avoid_gain(&self) -> f64 {
        self.avoid_gain * self.quality
    }

    pub fn effective_noise(&self) -> [f64; 2] {
        let k = 2.0 - self.quality;
        [self.noise_scale[0] * k, self.noise_scale[1] * k]
    }
}

/// Immutable after construction; sampling takes the caller's random stream.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpertPolicy {
    cfg: ExpertConfig,
}

impl ExpertPolicy {
    pub fn new(cfg: ExpertConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg })
    }

    pub fn config(&self) -> &ExpertConfig {
        &self.cfg
    }

    /// Desired lateral offset: zero unless a disc near the path ahead blocks
    /// the centerline, in which case shift to its roomier side.
    pub fn lateral_target(&self, ctx: &DrivingContext<'_>, window_ahead: f64) -> f64 {
        if !self.cfg.avoidance {
            return 0.0;
        }
        let sc = ctx.scene;
        let s = ctx.ego.frenet_s;
        let hw = sc.lane_half_width;
        let mut best = 0.0f64;
        for (center, r) in sc.discs_at(ctx.time) {
            let pr = sc.centerline.project(center);
            let clear = r + ctx.env.ego_radius + self.cfg.avoid_margin;
            let ds = pr.s - s;
            if ds < -clear || ds > self.cfg.avoid_radius {
                continue;
            }
            if pr.d.abs() >= clear {
                continue;
            }
            let right = pr.d - clear;
            let left = pr.d + clear;
            let room = hw + 0.5 * ctx.env.out_of_road_margin;
            let target = if pr.d >= 0.0 {
                if right >= -room { right } else { left }
            } else if left <= room {
                left
            } else {
                right
            };
            // distance from the disc to the window [s - clear, s + window_ahead]
            let gap = (pr.s - (s + window_ahead)).max((s - clear) - pr.s).max(0.0);
            let w = (1.0 - gap / self.cfg.avoid_ramp).clamp(0.0, 1.0);
            let shift = self.cfg.effective_avoid_gain() * w * target;
            if shift.abs() > best.abs() {
                best = shift;
            }
        }
        best.clamp(-hw, hw)
    }

    /// Speed cap from traffic on the planned lateral offset ahead.
    fn follow_speed(&self, ctx: &DrivingContext<'_>, d_target: f64) -> f64 {
        if !self.cfg.avoidance {
            return f64::INFINITY;
        }
        let sc = ctx.scene;
        let mut cap = f64::INFINITY;
        for t in &sc.traffic {
            let r = t.radius;
            let pr = sc.centerline.project(t.position(ctx.time));
            let ds = pr.s - ctx.ego.frenet_s;
            let contact = r + ctx.env.ego_radius;
            if ds <= 0.0 || ds > self.cfg.avoid_radius {
                continue;
            }
            let lateral = (pr.d - d_target).abs().min((pr.d - ctx.ego.frenet_d).abs());
            if lateral < contact + 0.3 {
                cap = cap.min(self.cfg.follow_gain * (ds - contact - self.cfg.follow_gap).max(0.0));
            }
        }
        cap
    }

    /// Deterministic controller output in `[-1, 1]^2` (steer, throttle).
    pub fn controller(&self, ctx: &DrivingContext<'_>) -> [f64; 2] {
        let c = &self.cfg;
        let ego = ctx.ego;
        let look = c.lookahead_base + c.lookahead_time * ego.speed;
        let d_target = self.lateral_target(ctx, look);
        let target = ctx.scene.centerline.offset_point(ego.frenet_s + look, d_target);
        let rel = sub(target, ego.position);
        let alpha = wrap_angle(rel[1].atan2(rel[0]) - ego.heading);
        let l = norm(rel).max(1e-6);
        let delta = (2.0 * ctx.env.wheelbase * alpha.sin() / l).atan();
        let steer = (c.effective_steer_gain() * delta / ctx.env.max_steer).clamp(-1.0, 1.0);
        let v_target = c.target_speed.min(self.follow_speed(ctx, d_target));
        let throttle = (c.speed_gain * (v_target - ego.speed)).clamp(-1.0, 1.0);
        [steer, throttle]
    }

    /// The expert action distribution at this state.
    pub fn distribution(&self, ctx: &DrivingContext<'_>) -> SquashedGaussian {
        let u = self.controller(ctx);
        let clip = self.cfg.mean_clip;
        let mean = u.iter().map(|a| a.clamp(-clip, clip).atanh()).collect();
        SquashedGaussian::new(mean, self.cfg.effective_noise().to_vec())
    }

    pub fn sample<R: Rng + ?Sized>(&self, ctx: &DrivingContext<'_>, rng: &mut R) -> [f64; 2] {
        let a = self.distribution(ctx).sample(rng);
        [a[0], a[1]]
    }

    /// Density of the squashed distribution on `(-1, 1)^2`; zero on the boundary.
    pub fn density(&self, ctx: &DrivingContext<'_>, action: [f64; 2]) -> f64 {
        self.distribution(ctx).density(&action)
    }

    /// Gaussian density at `atanh(action)`. This is the quantity the guardian
    /// thresholds.
    pub fn presquash_density(&self, ctx: &DrivingContext<'_>, action: [f64; 2]) -> f64 {
        self.distribution(ctx).presquash_density(&action)
    }

    /// Roll the expert out and estimate the per-step probability of a
    /// cost-incurring step. Episode `i` runs on `scenes[i % len]`.
    pub fn estimate_failure_rate<R: Rng + ?Sized>(
        &self,
        env_cfg: &EnvConfig,
        scenes: &[SceneSpec],
        n_episodes: usize,
        rng: &mut R,
    ) -> Result<FailureEstimate> {
        if n_episodes == 0 {
            return Err(Error::InvalidArgument("n_episodes must be at least 1".into()));
        }
        if scenes.is_empty() {
            return Err(Error::InvalidArgument("no scenes given".into()));
        }
        let mut est = FailureEstimate::default();
        let mut env = DrivingEnv::new(env_cfg.clone(), scenes[0].clone());
        for i in 0..n_episodes {
            env.reset_with(scenes[i % scenes.len()].clone());
            let mut ep_cost = 0u64;
            loop {
                let a = self.sample(&env.context(), rng);
                let r = env.step(a)?;
                est.steps += 1;
                if r.cost > 0 {
                    est.unsafe_steps += 1;
                }
                ep_cost += r.cost as u64;
                if r.done {
                    est.successes += r.success() as u64;
                    break;
                }
            }
            est.episodes += 1;
            est.total_cost += ep_cost;
        }
        let (lo, hi) = wilson_interval(est.unsafe_steps, est.steps, 1.96);
        est.epsilon = est.unsafe_steps as f64 / est.steps as f64;
        est.lower = lo;
        est.upper = hi;
        Ok(est)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FailureEstimate {
    pub epsilon: f64,
    pub lower: f64,
    pub upper: f64,
    pub unsafe_steps: u64,
    pub steps: u64,
    pub episodes: u64,
    pub successes: u64,
    pub total_cost: u64,
}

impl FailureEstimate {
    pub fn success_rate(&self) -> f64 {
        self.successes as f64 / self.episodes.max(1) as f64
    }

    pub fn mean_episode_cost(&self) -> f64 {
        self.total_cost as f64 / self.episodes.max(1) as f64
    }
}

/// Wilson score interval for `k` successes out of `n`.
pub fn wilson_interval(k: u64, n: u64, z: f64) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let n = n as f64;
    let p = k as f64 / n;
    let z2 = z * z;
    let denom = 1.0 + z2 / n;
    let center = (p + z2 / (2.0 * n)) / denom;
    let half = z * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt() / denom;
    ((center - half).max(0.0), (center + half).min(1.0))
}
