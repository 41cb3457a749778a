//! Takeover switch and the behavior policy it induces.
//!
//! With mode [`GuardianMode::ExpertDensity`] an agent action `a` passes through
//! when the expert's pre-squash density at `a` is at least `eta`; otherwise one
//! expert sample replaces it and the step is flagged as an intervention.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::expert::ExpertPolicy;
use crate::nn::SquashedGaussian;
use crate::sim::geometry::{norm, sub};
use crate::sim::DrivingContext;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuardianMode {
    ExpertDensity,
    RuleBased,
    Off,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RuleThresholds {
    /// Surface-to-surface gap between the ego disc and the nearest other disc.
    pub min_obstacle_distance: f64,
    /// Lateral room left before the out-of-road boundary.
    pub min_boundary_margin: f64,
}

impl Default for RuleThresholds {
    fn default() -> Self {
        Self {
            min_obstacle_distance: 2.0,
            min_boundary_margin: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GuardianConfig {
    pub eta: f64,
    pub mode: GuardianMode,
    pub rule_thresholds: RuleThresholds,
}

impl Default for GuardianConfig {
    fn default() -> Self {
        Self {
            eta: 0.05,
            mode: GuardianMode::ExpertDensity,
            rule_thresholds: RuleThresholds::default(),
        }
    }
}

impl GuardianConfig {
    pub fn off() -> Self {
        Self {
            mode: GuardianMode::Off,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(Error::Config(format!("eta must be finite and >= 0, got {}", self.eta)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SwitchOutcome {
    pub applied_action: [f64; 2],
    pub intervention: bool,
    pub expert_sample_used: bool,
}

impl SwitchOutcome {
    fn pass(action: [f64; 2]) -> Self {
        Self {
            applied_action: action,
            intervention: false,
            expert_sample_used: false,
        }
    }

    fn takeover(action: [f64; 2]) -> Self {
        Self {
            applied_action: action,
            intervention: true,
            expert_sample_used: true,
        }
    }

    pub fn cost(&self) -> f64 {
        if self.intervention {
            1.0
        } else {
            0.0
        }
    }
}

/// Membership test for the confident action set: `density >= eta`.
#[inline]
pub fn accepts(density: f64, eta: f64) -> bool {
    density >= eta
}

/// One application of the switch. The expert stream is only advanced when a
/// takeover actually happens.
pub fn switch<R: Rng + ?Sized>(
    ctx: &DrivingContext<'_>,
    agent_action: [f64; 2],
    expert: &ExpertPolicy,
    cfg: &GuardianConfig,
    rng: &mut R,
) -> SwitchOutcome {
    match cfg.mode {
        GuardianMode::Off => SwitchOutcome::pass(agent_action),
        GuardianMode::RuleBased => rule_switch(ctx, agent_action, expert, &cfg.rule_thresholds, rng),
        GuardianMode::ExpertDensity => {
            let dist = expert.distribution(ctx);
            switch_with(&dist, agent_action, cfg.eta, rng)
        }
    }
}

/// Density switch against an already evaluated expert distribution.
pub fn switch_with<R: Rng + ?Sized>(
    expert: &SquashedGaussian,
    agent_action: [f64; 2],
    eta: f64,
    rng: &mut R,
) -> SwitchOutcome {
    if eta <= 0.0 || accepts(expert.presquash_density(&agent_action), eta) {
        SwitchOutcome::pass(agent_action)
    } else {
        let a = expert.sample(rng);
        SwitchOutcome::takeover([a[0], a[1]])
    }
}

/// Distance-based takeover rule. Fires on strict inequality, so a state exactly
/// at a threshold is left to the agent.
pub fn rule_switch<R: Rng + ?Sized>(
    ctx: &DrivingContext<'_>,
    agent_action: [f64; 2],
    expert: &ExpertPolicy,
    thresholds: &RuleThresholds,
    rng: &mut R,
) -> SwitchOutcome {
    let (gap, margin) = rule_distances(ctx);
    if gap < thresholds.min_obstacle_distance || margin < thresholds.min_boundary_margin {
        SwitchOutcome::takeover(expert.sample(ctx, rng))
    } else {
        SwitchOutcome::pass(agent_action)
    }
}

/// `(nearest disc gap, boundary margin)` as used by [`rule_switch`].
pub fn rule_distances(ctx: &DrivingContext<'_>) -> (f64, f64) {
    let ego = ctx.ego;
    let gap = ctx
        .scene
        .discs_at(ctx.time)
        .into_iter()
        .map(|(c, r)| norm(sub(c, ego.position)) - r - ctx.env.ego_radius)
        .fold(f64::INFINITY, f64::min);
    let margin = ctx.scene.lane_half_width + ctx.env.out_of_road_margin - ego.frenet_d.abs();
    (gap, margin)
}

/// Discrete analogue of the behavior policy: `A = {i : expert[i] >= eta}`,
/// `F = sum of agent mass outside A`, `pi_hat = agent * 1[A] + expert * F`.
pub fn behavior_probs(expert: &[f64], agent: &[f64], eta: f64) -> Result<Vec<f64>> {
    if expert.len() != agent.len() {
        return Err(Error::shape(format!("{} actions", expert.len()), format!("{}", agent.len())));
    }
    let rejected: f64 = expert
        .iter()
        .zip(agent)
        .filter(|(e, _)| !accepts(**e, eta))
        .map(|(_, p)| p)
        .sum();
    Ok(expert
        .iter()
        .zip(agent)
        .map(|(&e, &p)| if accepts(e, eta) { p } else { 0.0 } + e * rejected)
        .collect())
}

/// Midpoint rule over `(-1, 1)^2` with `n x n` cells.
pub fn quadrature_box<F: Fn([f64; 2]) -> f64>(f: F, n: usize) -> f64 {
    let h = 2.0 / n as f64;
    let mut acc = 0.0;
    for i in 0..n {
        let x = -1.0 + (i as f64 + 0.5) * h;
        for j in 0..n {
            let y = -1.0 + (j as f64 + 0.5) * h;
            acc += f([x, y]);
        }
    }
    acc * h * h
}

/// Continuous behavior density for an agent and expert that are both squashed
/// Gaussians over `(-1, 1)^2`.
#[derive(Clone, Debug)]
pub struct MixedPolicy<'a> {
    pub agent: &'a SquashedGaussian,
    pub expert: &'a SquashedGaussian,
    pub eta: f64,
    /// Agent probability mass outside the confident set.
    pub rejected_mass: f64,
    /// Quadrature of the mixed density over the action box.
    pub normalization: f64,
}

impl<'a> MixedPolicy<'a> {
    /// `grid` controls both quadratures. The rejected mass is integrated in the
    /// agent's pre-squash coordinates over `mean +- 8 std`; the normalization
    /// check integrates the finished density directly over the action box and
    /// fails with [`Error::Quadrature`] when it is off by more than `tol`.
    pub fn new(
        agent: &'a SquashedGaussian,
        expert: &'a SquashedGaussian,
        eta: f64,
        grid: usize,
        tol: f64,
    ) -> Result<Self> {
        if grid == 0 {
            return Err(Error::InvalidArgument("quadrature grid must be non-empty".into()));
        }
        let rejected_mass = if eta <= 0.0 {
            0.0
        } else {
            let lo: Vec<f64> = agent.mean.iter().zip(&agent.std).map(|(m, s)| m - 8.0 * s).collect();
            let h: Vec<f64> = agent.std.iter().map(|s| 16.0 * s / grid as f64).collect();
            let mut acc = 0.0;
            for i in 0..grid {
                let u0 = lo[0] + (i as f64 + 0.5) * h[0];
                for j in 0..grid {
                    let u1 = lo[1] + (j as f64 + 0.5) * h[1];
                    let a = [u0.tanh(), u1.tanh()];
                    if !accepts(expert.presquash_density(&a), eta) {
                        acc += gauss(u0, agent.mean[0], agent.std[0]) * gauss(u1, agent.mean[1], agent.std[1]);
                    }
                }
            }
            (acc * h[0] * h[1]).clamp(0.0, 1.0)
        };
        let mut mixed = Self {
            agent,
            expert,
            eta,
            rejected_mass,
            normalization: f64::NAN,
        };
        mixed.normalization = quadrature_box(|a| mixed.density(a), grid);
        if (mixed.normalization - 1.0).abs() > tol {
            return Err(Error::Quadrature {
                integral: mixed.normalization,
                tolerance: tol,
            });
        }
        Ok(mixed)
    }

    pub fn density(&self, a: [f64; 2]) -> f64 {
        let inside = self.eta <= 0.0 || accepts(self.expert.presquash_density(&a), self.eta);
        let own = if inside { self.agent.density(&a) } else { 0.0 };
        own + self.expert.density(&a) * self.rejected_mass
    }
}

fn gauss(u: f64, m: f64, s: f64) -> f64 {
    let z = (u - m) / s;
    (-0.5 * z * z).exp() / (s * (2.0 * std::f64::consts::PI).sqrt())
}
