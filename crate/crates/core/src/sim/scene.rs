use rand::Rng;
use serde::{Deserialize, Serialize};

use super::geometry::{norm, sub, Polyline, Vec2};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObstacleKind {
    Cone,
    Triangle,
}

impl ObstacleKind {
    pub fn radius(self) -> f64 {
        match self {
            ObstacleKind::Cone => 0.4,
            ObstacleKind::Triangle => 0.9,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Obstacle {
    pub center: Vec2,
    pub radius: f64,
    pub kind: ObstacleKind,
}

/// A non-reactive vehicle that follows `path` at constant speed from `t = 0`
/// and parks at the end of it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Traffic {
    pub path: Polyline,
    pub speed: f64,
    pub radius: f64,
}

impl Traffic {
    pub fn position(&self, time: f64) -> Vec2 {
        self.path.pose_at(self.speed * time).0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
}

/// Seeded procedural driving scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub centerline: Polyline,
    pub lane_half_width: f64,
    pub obstacles: Vec<Obstacle>,
    pub traffic: Vec<Traffic>,
    pub spawn_pose: Pose,
    pub destination_s: f64,
}

impl SceneSpec {
    /// All discs at `time`: `(center, radius)`, static obstacles first.
    pub fn discs_at(&self, time: f64) -> Vec<(Vec2, f64)> {
        self.obstacles
            .iter()
            .map(|o| (o.center, o.radius))
            .chain(self.traffic.iter().map(|t| (t.position(time), t.radius)))
            .collect()
    }

    pub fn n_discs(&self) -> usize {
        self.obstacles.len() + self.traffic.len()
    }
}

/// Ranges the generator samples scene content from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DifficultyConfig {
    pub track_length: (f64, f64),
    pub segment_length: (f64, f64),
    /// Maximum |curvature| in 1/m.
    pub max_curvature: f64,
    /// Bound on the accumulated heading change, which keeps tracks from folding
    /// back onto themselves.
    pub max_heading: f64,
    pub lane_half_width: f64,
    pub n_obstacles: (usize, usize),
    pub n_traffic: (usize, usize),
    pub traffic_speed: (f64, f64),
    /// Straight, obstacle-free run-up at the start of every track.
    pub clear_start: f64,
    /// Minimum longitudinal spacing between static obstacles.
    pub obstacle_spacing: f64,
}

impl Default for DifficultyConfig {
    fn default() -> Self {
        Self {
            track_length: (120.0, 180.0),
            segment_length: (15.0, 35.0),
            max_curvature: 1.0 / 15.0,
            max_heading: 1.6,
            lane_half_width: 3.5,
            n_obstacles: (1, 3),
            n_traffic: (0, 1),
            traffic_speed: (2.0, 4.0),
            clear_start: 25.0,
            obstacle_spacing: 25.0,
        }
    }
}

impl DifficultyConfig {
    /// Straight empty road, used by tests and calibration runs.
    pub fn empty_straight(length: f64) -> Self {
        Self {
            track_length: (length, length),
            max_curvature: 0.0,
            n_obstacles: (0, 0),
            n_traffic: (0, 0),
            ..Self::default()
        }
    }
}

const SCENE_SALT: u64 = 0x5CE_E5;
const POINT_SPACING: f64 = 1.0;
const DEST_MARGIN: f64 = 5.0;
const TRAFFIC_RADIUS: f64 = 1.0;

/// Deterministic scene for `seed`.
pub fn generate_scene(seed: u64, cfg: &DifficultyConfig) -> SceneSpec {
    let mut r = rng::derive(seed, SCENE_SALT);
    let total = uniform(&mut r, cfg.track_length);

    // Centerline: straight run-up then alternating straights and arcs.
    let mut pts: Vec<Vec2> = vec![[0.0, 0.0]];
    let (mut x, mut y, mut h) = (0.0f64, 0.0f64, 0.0f64);
    let mut s = 0.0;
    let mut first = true;
    let mut straight = true;
    while s < total {
        let seg_len = if first {
            cfg.clear_start.max(cfg.segment_length.0)
        } else {
            uniform(&mut r, cfg.segment_length)
        };
        let kappa = if first || straight || cfg.max_curvature <= 0.0 {
            0.0
        } else {
            r.random_range(-cfg.max_curvature..=cfg.max_curvature)
        };
        first = false;
        straight = !straight;
        let n = (seg_len / POINT_SPACING).ceil().max(1.0) as usize;
        let ds = seg_len / n as f64;
        for _ in 0..n {
            if s >= total {
                break;
            }
            let step = ds.min(total - s);
            let mut k = kappa;
            if (h + k * step).abs() > cfg.max_heading {
                k = 0.0;
            }
            h += k * step;
            x += step * h.cos();
            y += step * h.sin();
            s += step;
            pts.push([x, y]);
        }
    }
    let centerline = Polyline::new(pts);
    let length = centerline.length();
    let destination_s = (length - DEST_MARGIN).max(length * 0.5);
    let hw = cfg.lane_half_width;

    let mut obstacles = Vec::new();
    let n_obs = r.random_range(cfg.n_obstacles.0..=cfg.n_obstacles.1);
    let lo = cfg.clear_start;
    let hi = destination_s - 10.0;
    let mut taken: Vec<f64> = Vec::new();
    for _ in 0..n_obs {
        if hi <= lo {
            break;
        }
        // bounded rejection sampling for spacing
        let mut placed = None;
        for _ in 0..32 {
            let s_o = r.random_range(lo..hi);
            if taken.iter().all(|t| (t - s_o).abs() >= cfg.obstacle_spacing) {
                placed = Some(s_o);
                break;
            }
        }
        let Some(s_o) = placed else { continue };
        taken.push(s_o);
        let kind = if r.random_bool(0.5) {
            ObstacleKind::Cone
        } else {
            ObstacleKind::Triangle
        };
        let lim = (hw - 1.2).max(0.0);
        let d_o = r.random_range(-lim..=lim);
        obstacles.push(Obstacle {
            center: centerline.offset_point(s_o, d_o),
            radius: kind.radius(),
            kind,
        });
    }

    let mut traffic = Vec::new();
    let n_tr = r.random_range(cfg.n_traffic.0..=cfg.n_traffic.1);
    for _ in 0..n_tr {
        let t_hi = destination_s - 40.0;
        let t_lo = cfg.clear_start + 10.0;
        if t_hi <= t_lo {
            break;
        }
        let s0 = r.random_range(t_lo..t_hi);
        let lane = if r.random_bool(0.5) { 0.5 * hw } else { -0.5 * hw };
        let speed = uniform(&mut r, cfg.traffic_speed);
        let mut path = Vec::new();
        let mut sp = s0;
        while sp <= length {
            path.push(centerline.offset_point(sp, lane));
            sp += 2.0;
        }
        if path.len() < 2 {
            continue;
        }
        traffic.push(Traffic {
            path: Polyline::new(path),
            speed,
            radius: TRAFFIC_RADIUS,
        });
    }

    SceneSpec {
        seed,
        centerline,
        lane_half_width: hw,
        obstacles,
        traffic,
        spawn_pose: Pose {
            x: 0.0,
            y: 0.0,
            heading: 0.0,
        },
        destination_s,
    }
}

fn uniform<R: Rng>(r: &mut R, range: (f64, f64)) -> f64 {
    if range.1 > range.0 {
        r.random_range(range.0..range.1)
    } else {
        range.0
    }
}

/// Seeds of a scene set declared as a half-open range.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedRange {
    pub start: u64,
    pub count: u64,
}

impl SeedRange {
    pub fn seeds(&self) -> impl Iterator<Item = u64> {
        self.start..self.start + self.count
    }

    pub fn overlaps(&self, other: &SeedRange) -> bool {
        self.start < other.start + other.count && other.start < self.start + self.count
    }

    pub fn nth(&self, i: u64) -> u64 {
        self.start + i % self.count.max(1)
    }
}

/// Minimum clearance between the spawn point and any static obstacle surface.
pub fn spawn_clearance(scene: &SceneSpec) -> f64 {
    let p = [scene.spawn_pose.x, scene.spawn_pose.y];
    scene
        .obstacles
        .iter()
        .map(|o| norm(sub(o.center, p)) - o.radius)
        .fold(f64::INFINITY, f64::min)
}
