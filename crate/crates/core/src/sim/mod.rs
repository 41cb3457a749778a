//! Top-down 2D driving environment.
//!
//! The ego is a kinematic bicycle with a disc footprint. Reward is the gain in
//! Frenet longitudinal coordinate per tick plus a terminal bonus on reaching the
//! destination; every new contact with an obstacle or traffic disc is one unit
//! of cost, and leaving the road ends the episode with one more.

pub mod geometry;
pub mod scene;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use geometry::{frenet_project, Polyline, Vec2};
pub use scene::{generate_scene, DifficultyConfig, Obstacle, ObstacleKind, SceneSpec, SeedRange, Traffic};

use crate::{Error, Result};
use geometry::{norm, ray_disc, sub, wrap_angle};

pub const ACTION_DIM: usize = 2;
pub const EGO_BLOCK: usize = 5;
pub const NAV_POINTS: [f64; 4] = [5.0, 10.0, 20.0, 30.0];
pub const NAV_BLOCK: usize = 2 * NAV_POINTS.len() + 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnvConfig {
    pub dt: f64,
    pub wheelbase: f64,
    pub max_steer: f64,
    pub max_accel: f64,
    pub max_brake: f64,
    pub max_speed: f64,
    pub ego_radius: f64,
    pub horizon: usize,
    pub n_rays: usize,
    pub lidar_range: f64,
    pub out_of_road_margin: f64,
    pub success_reward: f64,
    /// End the episode on the first collision instead of only charging cost.
    pub collision_terminates: bool,
    pub difficulty: DifficultyConfig,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            dt: 0.1,
            wheelbase: 2.5,
            max_steer: 0.5,
            max_accel: 3.0,
            max_brake: 6.0,
            max_speed: 12.0,
            ego_radius: 1.0,
            horizon: 1500,
            n_rays: 24,
            lidar_range: 20.0,
            out_of_road_margin: 0.5,
            success_reward: 20.0,
            collision_terminates: false,
            difficulty: DifficultyConfig::default(),
        }
    }
}

impl EnvConfig {
    pub fn obs_dim(&self) -> usize {
        EGO_BLOCK + NAV_BLOCK + self.n_rays
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EgoState {
    pub position: Vec2,
    pub heading: f64,
    pub speed: f64,
    pub frenet_s: f64,
    pub frenet_d: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub ego: Vec<f64>,
    pub nav: Vec<f64>,
    pub lidar: Vec<f64>,
}

impl Observation {
    pub fn len(&self) -> usize {
        self.ego.len() + self.nav.len() + self.lidar.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.len());
        v.extend_from_slice(&self.ego);
        v.extend_from_slice(&self.nav);
        v.extend_from_slice(&self.lidar);
        v
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.to_vec().into_iter().map(|v| v as f32).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminationKind {
    Destination,
    CrashTerminal,
    OutOfRoad,
    Horizon,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepResult {
    pub observation: Observation,
    pub reward: f64,
    pub cost: u32,
    pub done: bool,
    pub termination_kind: Option<TerminationKind>,
    pub info: BTreeMap<String, f64>,
}

impl StepResult {
    /// True when the episode ended for a reason other than the time limit, so
    /// the value of the next state must not be bootstrapped.
    pub fn terminal(&self) -> bool {
        self.done && self.termination_kind != Some(TerminationKind::Horizon)
    }

    pub fn success(&self) -> bool {
        self.termination_kind == Some(TerminationKind::Destination)
    }
}

/// Everything a scripted controller may look at.
#[derive(Clone, Copy, Debug)]
pub struct DrivingContext<'a> {
    pub scene: &'a SceneSpec,
    pub ego: &'a EgoState,
    pub time: f64,
    pub env: &'a EnvConfig,
}

/// Normalised lidar: ray `i` at ego-relative angle `2 pi i / n_rays`, value
/// `min(hit, max_range) / max_range`.
pub fn lidar_scan(
    state: &EgoState,
    discs: &[(Vec2, f64)],
    n_rays: usize,
    max_range: f64,
) -> Vec<f64> {
    assert!(n_rays >= 1);
    (0..n_rays)
        .map(|i| {
            let ang = state.heading + 2.0 * std::f64::consts::PI * i as f64 / n_rays as f64;
            let dir = [ang.cos(), ang.sin()];
            let hit = discs
                .iter()
                .filter_map(|&(c, r)| ray_disc(state.position, dir, c, r))
                .fold(max_range, f64::min);
            hit.min(max_range) / max_range
        })
        .collect()
}

/// Single-threaded environment instance owning its scene and state.
#[derive(Clone, Debug)]
pub struct DrivingEnv {
    cfg: EnvConfig,
    scene: SceneSpec,
    ego: EgoState,
    segment_hint: usize,
    steps: usize,
    last_action: [f64; 2],
    in_contact: Vec<bool>,
    episode_cost: u32,
    done: bool,
}

impl DrivingEnv {
    pub fn new(cfg: EnvConfig, scene: SceneSpec) -> Self {
        let mut env = Self {
            in_contact: vec![false; scene.n_discs()],
            cfg,
            ego: EgoState {
                position: [0.0, 0.0],
                heading: 0.0,
                speed: 0.0,
                frenet_s: 0.0,
                frenet_d: 0.0,
            },
            scene,
            segment_hint: 0,
            steps: 0,
            last_action: [0.0; 2],
            episode_cost: 0,
            done: true,
        };
        env.reset_state();
        env
    }

    pub fn config(&self) -> &EnvConfig {
        &self.cfg
    }

    pub fn scene(&self) -> &SceneSpec {
        &self.scene
    }

    pub fn ego(&self) -> &EgoState {
        &self.ego
    }

    pub fn time(&self) -> f64 {
        self.steps as f64 * self.cfg.dt
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn episode_cost(&self) -> u32 {
        self.episode_cost
    }

    pub fn context(&self) -> DrivingContext<'_> {
        DrivingContext {
            scene: &self.scene,
            ego: &self.ego,
            time: self.time(),
            env: &self.cfg,
        }
    }

    /// Replace the scene and reset.
    pub fn reset_with(&mut self, scene: SceneSpec) -> Observation {
        self.in_contact = vec![false; scene.n_discs()];
        self.scene = scene;
        self.reset()
    }

    pub fn reset(&mut self) -> Observation {
        self.reset_state();
        self.observe()
    }

    fn reset_state(&mut self) {
        let sp = self.scene.spawn_pose;
        let pr = self.scene.centerline.project_near([sp.x, sp.y], 0, 0, 4);
        self.ego = EgoState {
            position: [sp.x, sp.y],
            heading: sp.heading,
            speed: 0.0,
            frenet_s: pr.s,
            frenet_d: pr.d,
        };
        self.segment_hint = pr.segment;
        self.steps = 0;
        self.last_action = [0.0; 2];
        self.in_contact.iter_mut().for_each(|c| *c = false);
        self.episode_cost = 0;
        self.done = false;
    }

    pub fn step(&mut self, action: [f64; 2]) -> Result<StepResult> {
        if self.done {
            return Err(Error::EpisodeFinished);
        }
        if !action.iter().all(|a| a.is_finite()) {
            return Err(Error::NonFinite("action".into()));
        }
        let steer = action[0].clamp(-1.0, 1.0);
        let throttle = action[1].clamp(-1.0, 1.0);
        let c = &self.cfg;

        let accel = if throttle >= 0.0 {
            throttle * c.max_accel
        } else {
            throttle * c.max_brake
        };
        let v = (self.ego.speed + accel * c.dt).clamp(0.0, c.max_speed);
        let delta = steer * c.max_steer;
        let h = self.ego.heading;
        let x = self.ego.position[0] + v * h.cos() * c.dt;
        let y = self.ego.position[1] + v * h.sin() * c.dt;
        let heading = wrap_angle(h + v / c.wheelbase * delta.tan() * c.dt);
        self.steps += 1;

        let prev_s = self.ego.frenet_s;
        let pr = self
            .scene
            .centerline
            .project_near([x, y], self.segment_hint, 3, 8);
        self.segment_hint = pr.segment;
        self.ego = EgoState {
            position: [x, y],
            heading,
            speed: v,
            frenet_s: pr.s,
            frenet_d: pr.d,
        };
        self.last_action = [steer, throttle];

        // collisions: one unit of cost per fresh contact
        let time = self.time();
        let mut cost = 0u32;
        let mut crashed = false;
        let mut min_gap = f64::INFINITY;
        for (k, (center, r)) in self.scene.discs_at(time).into_iter().enumerate() {
            let gap = norm(sub(center, self.ego.position)) - r - c.ego_radius;
            min_gap = min_gap.min(gap);
            let touching = gap < 0.0;
            if touching && !self.in_contact[k] {
                cost += 1;
                crashed = true;
            }
            self.in_contact[k] = touching;
        }

        let mut reward;
        let mut kind = None;
        if self.ego.frenet_s >= self.scene.destination_s {
            reward = self.scene.destination_s - prev_s + c.success_reward;
            self.ego.frenet_s = self.scene.destination_s;
            kind = Some(TerminationKind::Destination);
        } else {
            reward = self.ego.frenet_s - prev_s;
            if self.ego.frenet_d.abs() > self.scene.lane_half_width + c.out_of_road_margin {
                cost += 1;
                kind = Some(TerminationKind::OutOfRoad);
            } else if crashed && c.collision_terminates {
                kind = Some(TerminationKind::CrashTerminal);
            } else if self.steps >= c.horizon {
                kind = Some(TerminationKind::Horizon);
            }
        }
        if !reward.is_finite() {
            reward = 0.0;
        }
        self.episode_cost += cost;
        self.done = kind.is_some();

        let mut info = BTreeMap::new();
        info.insert("speed".into(), v);
        info.insert("frenet_s".into(), self.ego.frenet_s);
        info.insert("frenet_d".into(), self.ego.frenet_d);
        info.insert("min_gap".into(), min_gap);
        info.insert("episode_cost".into(), self.episode_cost as f64);

        Ok(StepResult {
            observation: self.observe(),
            reward,
            cost,
            done: self.done,
            termination_kind: kind,
            info,
        })
    }

    pub fn observe(&self) -> Observation {
        let c = &self.cfg;
        let sc = &self.scene;
        let (_, track_h) = sc.centerline.pose_at(self.ego.frenet_s);
        let heading_err = wrap_angle(self.ego.heading - track_h);
        let road = sc.lane_half_width + c.out_of_road_margin;
        let ego = vec![
            2.0 * self.ego.speed / c.max_speed - 1.0,
            heading_err / std::f64::consts::PI,
            (self.ego.frenet_d / road).clamp(-1.0, 1.0),
            self.last_action[0],
            self.last_action[1],
        ];
        let mut nav = Vec::with_capacity(NAV_BLOCK);
        let far = NAV_POINTS[NAV_POINTS.len() - 1] + road;
        for ahead in NAV_POINTS {
            let (p, _) = sc.centerline.pose_at(self.ego.frenet_s + ahead);
            let rel = sub(p, self.ego.position);
            let bearing = wrap_angle(rel[1].atan2(rel[0]) - self.ego.heading);
            nav.push(bearing / std::f64::consts::PI);
            nav.push((norm(rel) / far).min(1.0));
        }
        let remaining = (sc.destination_s - self.ego.frenet_s).max(0.0) / sc.destination_s;
        nav.push(remaining.min(1.0));
        let discs = sc.discs_at(self.time());
        let lidar = lidar_scan(&self.ego, &discs, c.n_rays, c.lidar_range);
        Observation { ego, nav, lidar }
    }
}
