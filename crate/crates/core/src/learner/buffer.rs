use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::nn::Real;
use crate::{Error, Result};

/// One environment step as seen by the learner.
///
/// `expert_mean`/`expert_std` are the pre-squash parameters of the expert
/// distribution at `obs`; CQL draws fresh expert actions from them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub obs: Vec<f32>,
    pub agent_action: [f32; 2],
    pub applied_action: [f32; 2],
    pub reward: f32,
    /// Environment collision cost of the step.
    pub cost: f32,
    pub intervention: f32,
    pub next_obs: Vec<f32>,
    /// Terminal step: no bootstrapping. Horizon truncation is not terminal.
    pub done: bool,
    pub takeover: bool,
    pub expert_mean: [f32; 2],
    pub expert_std: [f32; 2],
}

impl Transition {
    pub fn validate(&self) -> Result<()> {
        let flagged = self.intervention == 1.0;
        if self.intervention != 0.0 && !flagged {
            return Err(Error::InvalidArgument(format!(
                "intervention must be 0 or 1, got {}",
                self.intervention
            )));
        }
        if self.takeover != flagged {
            return Err(Error::InvalidArgument(
                "takeover flag and intervention disagree".into(),
            ));
        }
        if !self.takeover && self.applied_action != self.agent_action {
            return Err(Error::InvalidArgument(
                "applied action differs from agent action without a takeover".into(),
            ));
        }
        if self.obs.len() != self.next_obs.len() {
            return Err(Error::shape(
                format!("next_obs of length {}", self.obs.len()),
                self.next_obs.len().to_string(),
            ));
        }
        let finite = self.obs.iter().chain(&self.next_obs).all(|v| v.is_finite())
            && [self.reward, self.cost].iter().all(|v| v.is_finite());
        if !finite {
            return Err(Error::NonFinite("transition".into()));
        }
        Ok(())
    }
}

/// Sampled minibatch, one row per transition.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch<F: Real> {
    pub obs: Array2<F>,
    pub agent_action: Array2<F>,
    pub applied_action: Array2<F>,
    pub reward: Array2<F>,
    pub cost: Array2<F>,
    pub intervention: Array2<F>,
    pub next_obs: Array2<F>,
    pub done: Array2<F>,
    pub expert_mean: Array2<F>,
    pub expert_std: Array2<F>,
    /// Buffer slots the rows came from.
    pub indices: Vec<usize>,
}

impl<F: Real> Batch<F> {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

const NONE: usize = usize::MAX;

/// Ring buffer in flat `f32` storage with an index over takeover slots.
#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    capacity: usize,
    obs_dim: usize,
    len: usize,
    head: usize,
    obs: Vec<f32>,
    next_obs: Vec<f32>,
    agent_action: Vec<f32>,
    applied_action: Vec<f32>,
    expert_mean: Vec<f32>,
    expert_std: Vec<f32>,
    reward: Vec<f32>,
    cost: Vec<f32>,
    intervention: Vec<f32>,
    done: Vec<bool>,
    takeover_slots: Vec<usize>,
    /// Position of each slot in `takeover_slots`, or `NONE`.
    takeover_pos: Vec<usize>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, obs_dim: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::InvalidArgument("buffer capacity must be positive".into()));
        }
        Ok(Self {
            capacity,
            obs_dim,
            len: 0,
            head: 0,
            obs: vec![0.0; capacity * obs_dim],
            next_obs: vec![0.0; capacity * obs_dim],
            agent_action: vec![0.0; capacity * 2],
            applied_action: vec![0.0; capacity * 2],
            expert_mean: vec![0.0; capacity * 2],
            expert_std: vec![0.0; capacity * 2],
            reward: vec![0.0; capacity],
            cost: vec![0.0; capacity],
            intervention: vec![0.0; capacity],
            done: vec![false; capacity],
            takeover_slots: Vec::new(),
            takeover_pos: vec![NONE; capacity],
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn takeover_len(&self) -> usize {
        self.takeover_slots.len()
    }

    pub fn push(&mut self, t: &Transition) -> Result<()> {
        t.validate()?;
        if t.obs.len() != self.obs_dim {
            return Err(Error::shape(
                format!("obs of length {}", self.obs_dim),
                t.obs.len().to_string(),
            ));
        }
        let i = self.head;
        if self.takeover_pos[i] != NONE {
            let p = self.takeover_pos[i];
            self.takeover_slots.swap_remove(p);
            if p < self.takeover_slots.len() {
                let moved = self.takeover_slots[p];
                self.takeover_pos[moved] = p;
            }
            self.takeover_pos[i] = NONE;
        }
        let d = self.obs_dim;
        self.obs[i * d..(i + 1) * d].copy_from_slice(&t.obs);
        self.next_obs[i * d..(i + 1) * d].copy_from_slice(&t.next_obs);
        self.agent_action[2 * i..2 * i + 2].copy_from_slice(&t.agent_action);
        self.applied_action[2 * i..2 * i + 2].copy_from_slice(&t.applied_action);
        self.expert_mean[2 * i..2 * i + 2].copy_from_slice(&t.expert_mean);
        self.expert_std[2 * i..2 * i + 2].copy_from_slice(&t.expert_std);
        self.reward[i] = t.reward;
        self.cost[i] = t.cost;
        self.intervention[i] = t.intervention;
        self.done[i] = t.done;
        if t.takeover {
            self.takeover_pos[i] = self.takeover_slots.len();
            self.takeover_slots.push(i);
        }
        self.head = (self.head + 1) % self.capacity;
        self.len = (self.len + 1).min(self.capacity);
        Ok(())
    }

    pub fn get(&self, i: usize) -> Option<Transition> {
        if i >= self.len {
            return None;
        }
        let d = self.obs_dim;
        let pair = |v: &[f32]| [v[2 * i], v[2 * i + 1]];
        Some(Transition {
            obs: self.obs[i * d..(i + 1) * d].to_vec(),
            agent_action: pair(&self.agent_action),
            applied_action: pair(&self.applied_action),
            reward: self.reward[i],
            cost: self.cost[i],
            intervention: self.intervention[i],
            next_obs: self.next_obs[i * d..(i + 1) * d].to_vec(),
            done: self.done[i],
            takeover: self.takeover_pos[i] != NONE,
            expert_mean: pair(&self.expert_mean),
            expert_std: pair(&self.expert_std),
        })
    }

    pub fn is_takeover(&self, slot: usize) -> bool {
        slot < self.len && self.takeover_pos[slot] != NONE
    }

    /// Uniform sample with replacement over all stored transitions.
    pub fn sample<F: Real, R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Batch<F>> {
        if self.len == 0 {
            return Err(Error::EmptyBatch("ReplayBuffer::sample"));
        }
        let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..self.len)).collect();
        Ok(self.gather(idx))
    }

    /// Uniform sample over takeover transitions only. Empty when there are none.
    pub fn sample_demo<F: Real, R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Batch<F> {
        let k = self.takeover_slots.len();
        let idx = if k == 0 {
            Vec::new()
        } else {
            (0..n)
                .map(|_| self.takeover_slots[rng.random_range(0..k)])
                .collect()
        };
        self.gather(idx)
    }

    pub fn gather<F: Real>(&self, idx: Vec<usize>) -> Batch<F> {
        let n = idx.len();
        let d = self.obs_dim;
        let rows = |src: &[f32], w: usize| {
            Array2::from_shape_fn((n, w), |(r, c)| F::lit(src[idx[r] * w + c] as f64))
        };
        let done = Array2::from_shape_fn((n, 1), |(r, _)| {
            if self.done[idx[r]] {
                F::one()
            } else {
                F::zero()
            }
        });
        Batch {
            obs: rows(&self.obs, d),
            agent_action: rows(&self.agent_action, 2),
            applied_action: rows(&self.applied_action, 2),
            reward: rows(&self.reward, 1),
            cost: rows(&self.cost, 1),
            intervention: rows(&self.intervention, 1),
            next_obs: rows(&self.next_obs, d),
            done,
            expert_mean: rows(&self.expert_mean, 2),
            expert_std: rows(&self.expert_std, 2),
            indices: idx,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    pub(crate) fn transition(i: usize, takeover: bool) -> Transition {
        let v = i as f32;
        Transition {
            obs: vec![v, -v, 0.5],
            agent_action: [0.1, 0.2],
            applied_action: if takeover { [0.3, 0.4] } else { [0.1, 0.2] },
            reward: v,
            cost: 0.0,
            intervention: if takeover { 1.0 } else { 0.0 },
            next_obs: vec![v + 1.0, -v, 0.5],
            done: i % 7 == 0,
            takeover,
            expert_mean: [0.0, 0.1],
            expert_std: [0.2, 0.3],
        }
    }

    #[test]
    fn invariant_violations_are_rejected() {
        let mut t = transition(1, false);
        t.applied_action = [0.9, 0.9];
        assert!(t.validate().is_err());
        let mut t = transition(1, true);
        t.intervention = 0.0;
        assert!(t.validate().is_err());
        assert!(transition(1, true).validate().is_ok());
    }

    #[test]
    fn round_trip_and_wraparound() {
        let mut b = ReplayBuffer::new(5, 3).unwrap();
        for i in 0..8 {
            b.push(&transition(i, i % 2 == 0)).unwrap();
        }
        assert_eq!(b.len(), 5);
        // slots hold 5,6,7,3,4
        assert_eq!(b.get(0).unwrap(), transition(5, false));
        assert_eq!(b.get(2).unwrap(), transition(7, false));
        assert_eq!(b.get(3).unwrap(), transition(3, false));
        assert_eq!(b.takeover_len(), 2);
        assert!(b.is_takeover(1) && b.is_takeover(4));
    }

    #[test]
    fn demo_sampler_only_returns_takeovers() {
        let mut b = ReplayBuffer::new(64, 3).unwrap();
        let mut r = rng::derive(1, 1);
        for i in 0..500 {
            b.push(&transition(i, r.random_bool(0.3))).unwrap();
            let batch: Batch<f32> = b.sample_demo(16, &mut r);
            for (k, &s) in batch.indices.iter().enumerate() {
                assert!(b.is_takeover(s));
                assert_eq!(batch.intervention[[k, 0]], 1.0);
            }
        }
    }

    #[test]
    fn empty_demo_batch_when_no_takeovers() {
        let mut b = ReplayBuffer::new(8, 3).unwrap();
        b.push(&transition(0, false)).unwrap();
        let batch: Batch<f64> = b.sample_demo(4, &mut rng::derive(0, 0));
        assert!(batch.is_empty());
        assert_eq!(batch.obs.dim(), (0, 3));
    }

    #[test]
    fn uniform_sampling_passes_chi_square() {
        let n = 20;
        let mut b = ReplayBuffer::new(n, 3).unwrap();
        for i in 0..n {
            b.push(&transition(i, false)).unwrap();
        }
        let mut counts = vec![0usize; n];
        let mut r = rng::derive(2, 2);
        let draws = 40_000;
        for _ in 0..draws / 100 {
            let batch: Batch<f32> = b.sample(100, &mut r).unwrap();
            for &i in &batch.indices {
                counts[i] += 1;
            }
        }
        let e = draws as f64 / n as f64;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - e).powi(2) / e).sum();
        // chi-square critical value, 19 degrees of freedom, alpha = 0.01
        assert!(chi2 < 36.191, "chi2 = {chi2}");
    }
}
