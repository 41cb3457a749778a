//! Exact checks of the training-risk bound on tabular MDPs.
//!
//! Failure values are discounted sums of an unsafe indicator `I(s, a)` and are
//! computed by solving `(I - gamma P_pi) V = r_I` directly.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::Exp1;
use serde::{Deserialize, Serialize};

use crate::guardian::{accepts, behavior_probs};
use crate::{Error, Result};

const ROW_TOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TabularMdp {
    pub n_states: usize,
    pub n_actions: usize,
    /// `p[(s * n_actions + a) * n_states + s2] = P(s2 | s, a)`.
    pub p: Vec<f64>,
    /// `unsafe_[s * n_actions + a] = I(s, a)`.
    pub unsafe_: Vec<bool>,
    pub gamma: f64,
    pub mu0: Vec<f64>,
}

impl TabularMdp {
    pub fn new(
        n_states: usize,
        n_actions: usize,
        p: Vec<f64>,
        unsafe_: Vec<bool>,
        gamma: f64,
        mu0: Vec<f64>,
    ) -> Result<Self> {
        let m = Self {
            n_states,
            n_actions,
            p,
            unsafe_,
            gamma,
            mu0,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let (ns, na) = (self.n_states, self.n_actions);
        if ns == 0 || na == 0 {
            return Err(Error::InvalidArgument("empty MDP".into()));
        }
        if self.p.len() != ns * na * ns {
            return Err(Error::shape(format!("{} transition entries", ns * na * ns), self.p.len().to_string()));
        }
        if self.unsafe_.len() != ns * na {
            return Err(Error::shape(format!("{} indicator entries", ns * na), self.unsafe_.len().to_string()));
        }
        if self.mu0.len() != ns {
            return Err(Error::shape(format!("{ns} initial probabilities"), self.mu0.len().to_string()));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::InvalidArgument(format!("gamma {} outside (0, 1)", self.gamma)));
        }
        for row in self.p.chunks(ns).chain(std::iter::once(&self.mu0[..])) {
            check_row(row)?;
        }
        Ok(())
    }

    pub fn transition(&self, s: usize, a: usize) -> &[f64] {
        let k = (s * self.n_actions + a) * self.n_states;
        &self.p[k..k + self.n_states]
    }

    pub fn is_unsafe(&self, s: usize, a: usize) -> bool {
        self.unsafe_[s * self.n_actions + a]
    }

    /// State-to-state matrix under `policy`.
    pub fn policy_matrix(&self, policy: &TabularPolicy) -> DMatrix<f64> {
        let ns = self.n_states;
        DMatrix::from_fn(ns, ns, |s, s2| {
            (0..self.n_actions)
                .map(|a| policy.prob(s, a) * self.transition(s, a)[s2])
                .sum()
        })
    }

    /// Expected one-step indicator under `policy` at every state.
    pub fn step_failure(&self, policy: &TabularPolicy) -> Vec<f64> {
        (0..self.n_states)
            .map(|s| {
                (0..self.n_actions)
                    .filter(|&a| self.is_unsafe(s, a))
                    .map(|a| policy.prob(s, a))
                    .sum()
            })
            .collect()
    }
}

fn check_row(row: &[f64]) -> Result<()> {
    let sum: f64 = row.iter().sum();
    if row.iter().any(|&v| !(v >= 0.0)) || (sum - 1.0).abs() > ROW_TOL {
        return Err(Error::InvalidArgument(format!("row is not a distribution (sum {sum})")));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TabularPolicy {
    pub n_states: usize,
    pub n_actions: usize,
    /// `probs[s * n_actions + a]`.
    pub probs: Vec<f64>,
}

impl TabularPolicy {
    pub fn new(n_states: usize, n_actions: usize, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != n_states * n_actions {
            return Err(Error::shape(format!("{}", n_states * n_actions), probs.len().to_string()));
        }
        for row in probs.chunks(n_actions) {
            check_row(row)?;
        }
        Ok(Self {
            n_states,
            n_actions,
            probs,
        })
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        Self {
            n_states,
            n_actions,
            probs: vec![1.0 / n_actions as f64; n_states * n_actions],
        }
    }

    pub fn prob(&self, s: usize, a: usize) -> f64 {
        self.probs[s * self.n_actions + a]
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.probs[s * self.n_actions..(s + 1) * self.n_actions]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FailureValue {
    pub per_state: Vec<f64>,
    /// `E_{s0 ~ mu0} V(s0)`.
    pub expected: f64,
}

pub fn exact_failure_value(mdp: &TabularMdp, policy: &TabularPolicy) -> Result<FailureValue> {
    check_shapes(mdp, policy)?;
    let ns = mdp.n_states;
    let a = DMatrix::<f64>::identity(ns, ns) - mdp.policy_matrix(policy) * mdp.gamma;
    let r = DVector::from_vec(mdp.step_failure(policy));
    let v = a.lu().solve(&r).ok_or(Error::Singular)?;
    let per_state: Vec<f64> = v.iter().copied().collect();
    let expected = per_state.iter().zip(&mdp.mu0).map(|(v, m)| v * m).sum();
    Ok(FailureValue { per_state, expected })
}

fn check_shapes(mdp: &TabularMdp, policy: &TabularPolicy) -> Result<()> {
    if mdp.n_states != policy.n_states || mdp.n_actions != policy.n_actions {
        return Err(Error::shape(
            format!("{}x{}", mdp.n_states, mdp.n_actions),
            format!("{}x{}", policy.n_states, policy.n_actions),
        ));
    }
    Ok(())
}

/// Normalised discounted state occupancy `d = (1 - gamma) mu0^T (I - gamma P)^-1`.
pub fn occupancy(mdp: &TabularMdp, policy: &TabularPolicy) -> Result<Vec<f64>> {
    check_shapes(mdp, policy)?;
    let ns = mdp.n_states;
    let a = (DMatrix::<f64>::identity(ns, ns) - mdp.policy_matrix(policy) * mdp.gamma).transpose();
    let mu = DVector::from_column_slice(&mdp.mu0);
    let d = a.lu().solve(&mu).ok_or(Error::Singular)?;
    Ok(d.iter().map(|v| v * (1.0 - mdp.gamma)).collect())
}

/// Tabular behavior policy, row by row.
pub fn mix_policy(agent: &TabularPolicy, expert: &TabularPolicy, eta: f64) -> Result<TabularPolicy> {
    if agent.n_states != expert.n_states || agent.n_actions != expert.n_actions {
        return Err(Error::shape(
            format!("{}x{}", expert.n_states, expert.n_actions),
            format!("{}x{}", agent.n_states, agent.n_actions),
        ));
    }
    let mut probs = Vec::with_capacity(agent.probs.len());
    for s in 0..agent.n_states {
        probs.extend(behavior_probs(expert.row(s), agent.row(s), eta)?);
    }
    Ok(TabularPolicy {
        n_states: agent.n_states,
        n_actions: agent.n_actions,
        probs,
    })
}

/// `eps / (1 - gamma) * (1 + 1/eta + gamma / (1 - gamma) * k_eta)`.
pub fn theorem_bound(epsilon: f64, eta: f64, gamma: f64, k_eta: f64) -> Result<f64> {
    if !(eta > 0.0) {
        return Err(Error::InvalidArgument("the bound needs eta > 0".into()));
    }
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(Error::InvalidArgument(format!("gamma {gamma} outside (0, 1)")));
    }
    Ok(epsilon / (1.0 - gamma) * (1.0 + 1.0 / eta + gamma / (1.0 - gamma) * k_eta))
}

/// Counting-measure size of the largest confident set over states.
pub fn k_eta_tabular(expert: &TabularPolicy, eta: f64) -> usize {
    (0..expert.n_states)
        .map(|s| expert.row(s).iter().filter(|&&p| accepts(p, eta)).count())
        .max()
        .unwrap_or(0)
}

/// Length of `{x in [lo, hi] : f(x) >= eta}` by an `n`-cell midpoint rule.
pub fn superlevel_length<F: Fn(f64) -> f64>(f: F, eta: f64, lo: f64, hi: f64, n: usize) -> f64 {
    let h = (hi - lo) / n as f64;
    (0..n)
        .filter(|&i| accepts(f(lo + (i as f64 + 0.5) * h), eta))
        .count() as f64
        * h
}

/// Area of `{a in [-1, 1]^2 : f(a) >= eta}` on an `n x n` midpoint grid.
pub fn superlevel_area<F: Fn([f64; 2]) -> f64>(f: F, eta: f64, n: usize) -> f64 {
    let h = 2.0 / n as f64;
    let mut count = 0usize;
    for i in 0..n {
        for j in 0..n {
            let a = [-1.0 + (i as f64 + 0.5) * h, -1.0 + (j as f64 + 0.5) * h];
            if accepts(f(a), eta) {
                count += 1;
            }
        }
    }
    count as f64 * h * h
}

pub const K_ETA_GRID: usize = 400;

/// Continuous confident-set measure maxed over a sample of state densities.
pub fn k_eta_continuous<F: Fn([f64; 2]) -> f64>(densities: &[F], eta: f64) -> f64 {
    densities
        .iter()
        .map(|f| superlevel_area(f, eta, K_ETA_GRID))
        .fold(0.0, f64::max)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lemma2Check {
    pub epsilon: f64,
    pub unsafe_measure: f64,
    pub bound: f64,
    pub holds: bool,
}

/// Measure of the unsafe part of the confident set against `eps / eta` for one
/// state of a discrete expert.
pub fn verify_lemma2(expert: &[f64], unsafe_: &[bool], eta: f64) -> Result<Lemma2Check> {
    if !(eta > 0.0) {
        return Err(Error::InvalidArgument("eta must be positive".into()));
    }
    if expert.len() != unsafe_.len() {
        return Err(Error::shape(expert.len().to_string(), unsafe_.len().to_string()));
    }
    let epsilon: f64 = expert.iter().zip(unsafe_).filter(|(_, &u)| u).map(|(p, _)| p).sum();
    let unsafe_measure = expert
        .iter()
        .zip(unsafe_)
        .filter(|(&p, &u)| u && accepts(p, eta))
        .count() as f64;
    let bound = epsilon / eta;
    Ok(Lemma2Check {
        epsilon,
        unsafe_measure,
        bound,
        holds: unsafe_measure <= bound,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lemma3Check {
    pub epsilon: f64,
    pub max_value: f64,
    pub bound: f64,
    pub violating_states: usize,
}

pub fn verify_lemma3(mdp: &TabularMdp, expert: &TabularPolicy) -> Result<Lemma3Check> {
    let v = exact_failure_value(mdp, expert)?;
    let epsilon = mdp.step_failure(expert).into_iter().fold(0.0, f64::max);
    let bound = epsilon / (1.0 - mdp.gamma);
    let slack = 1e-12 * (1.0 + bound);
    Ok(Lemma3Check {
        epsilon,
        max_value: v.per_state.iter().copied().fold(0.0, f64::max),
        bound,
        violating_states: v.per_state.iter().filter(|&&x| x > bound + slack).count(),
    })
}

/// Both sides of the performance-difference identity for the behavior policy.
pub fn lemma1_sides(mdp: &TabularMdp, expert: &TabularPolicy, behavior: &TabularPolicy) -> Result<(f64, f64)> {
    let v_hat = exact_failure_value(mdp, behavior)?;
    let v_e = exact_failure_value(mdp, expert)?;
    let d = occupancy(mdp, behavior)?;
    let g = mdp.gamma;
    let mut adv = 0.0;
    for s in 0..mdp.n_states {
        for a in 0..mdp.n_actions {
            let next: f64 = mdp
                .transition(s, a)
                .iter()
                .zip(&v_e.per_state)
                .map(|(p, v)| p * v)
                .sum();
            let i = if mdp.is_unsafe(s, a) { 1.0 } else { 0.0 };
            adv += d[s] * behavior.prob(s, a) * (i + g * next - v_e.per_state[s]);
        }
    }
    Ok((v_hat.expected, v_e.expected + adv / (1.0 - g)))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceRanges {
    pub states: (usize, usize),
    pub actions: (usize, usize),
    pub gamma: (f64, f64),
    pub unsafe_p: (f64, f64),
    pub eta: (f64, f64),
}

impl Default for InstanceRanges {
    fn default() -> Self {
        Self {
            states: (3, 8),
            actions: (2, 5),
            gamma: (0.5, 0.99),
            unsafe_p: (0.05, 0.3),
            eta: (0.01, 0.6),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub mdp: TabularMdp,
    pub expert: TabularPolicy,
    pub agent: TabularPolicy,
    pub eta: f64,
}

fn dirichlet_ones<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    let x: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(Exp1)).collect();
    let sum: f64 = x.iter().sum();
    let mut p: Vec<f64> = x.iter().map(|v| v / sum).collect();
    // push the rounding residue into the largest entry
    let resid = 1.0 - p.iter().sum::<f64>();
    let imax = (0..n).max_by(|&a, &b| p[a].total_cmp(&p[b])).unwrap_or(0);
    p[imax] += resid;
    p
}

fn rows<R: Rng + ?Sized>(count: usize, width: usize, rng: &mut R) -> Vec<f64> {
    (0..count).flat_map(|_| dirichlet_ones(width, rng)).collect()
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, range: (f64, f64)) -> f64 {
    if range.1 > range.0 {
        rng.random_range(range.0..range.1)
    } else {
        range.0
    }
}

pub fn random_instance<R: Rng + ?Sized>(ranges: &InstanceRanges, rng: &mut R) -> Instance {
    let ns = rng.random_range(ranges.states.0..=ranges.states.1);
    let na = rng.random_range(ranges.actions.0..=ranges.actions.1);
    let gamma = uniform(rng, ranges.gamma);
    let pu = uniform(rng, ranges.unsafe_p);
    let mdp = TabularMdp {
        n_states: ns,
        n_actions: na,
        p: rows(ns * na, ns, rng),
        unsafe_: (0..ns * na).map(|_| rng.random_bool(pu)).collect(),
        gamma,
        mu0: dirichlet_ones(ns, rng),
    };
    let expert = TabularPolicy {
        n_states: ns,
        n_actions: na,
        probs: rows(ns, na, rng),
    };
    let agent = TabularPolicy {
        n_states: ns,
        n_actions: na,
        probs: rows(ns, na, rng),
    };
    let eta = uniform(rng, ranges.eta);
    Instance { mdp, expert, agent, eta }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceOutcome {
    pub v_hat: f64,
    pub bound: f64,
    pub epsilon: f64,
    pub k_eta: usize,
    pub lemma1_error: f64,
    pub lemma2_violations: usize,
    pub lemma3_violations: usize,
    pub k_eta_monotone: bool,
}

/// Grid of thresholds used for the monotonicity sweep of `k_eta`.
fn eta_grid() -> impl Iterator<Item = f64> {
    (1..=40).map(|i| i as f64 * 0.025)
}

pub fn check_instance(inst: &Instance) -> Result<InstanceOutcome> {
    let mdp = &inst.mdp;
    let behavior = mix_policy(&inst.agent, &inst.expert, inst.eta)?;
    let v_hat = exact_failure_value(mdp, &behavior)?.expected;
    let epsilon = mdp.step_failure(&inst.expert).into_iter().fold(0.0, f64::max);
    let k = k_eta_tabular(&inst.expert, inst.eta);
    let bound = theorem_bound(epsilon, inst.eta, mdp.gamma, k as f64)?;
    let (lhs, rhs) = lemma1_sides(mdp, &inst.expert, &behavior)?;
    let mut lemma2_violations = 0;
    for s in 0..mdp.n_states {
        let flags: Vec<bool> = (0..mdp.n_actions).map(|a| mdp.is_unsafe(s, a)).collect();
        // compared against the uniform expert failure rate, not the per-state one
        let c = verify_lemma2(inst.expert.row(s), &flags, inst.eta)?;
        if c.unsafe_measure > epsilon / inst.eta {
            lemma2_violations += 1;
        }
    }
    let lemma3 = verify_lemma3(mdp, &inst.expert)?;
    let mut prev = usize::MAX;
    let mut k_eta_monotone = true;
    for eta in eta_grid() {
        let k = k_eta_tabular(&inst.expert, eta);
        k_eta_monotone &= k <= prev;
        prev = k;
    }
    Ok(InstanceOutcome {
        v_hat,
        bound,
        epsilon,
        k_eta: k,
        lemma1_error: (lhs - rhs).abs(),
        lemma2_violations,
        lemma3_violations: lemma3.violating_states,
        k_eta_monotone,
    })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TheoryReport {
    pub instances: usize,
    pub bound_violations: usize,
    pub lemma1_failures: usize,
    pub lemma1_max_error: f64,
    pub lemma2_violations: usize,
    pub lemma3_violations: usize,
    pub k_eta_non_monotone: usize,
    /// Smallest `bound - v_hat` seen.
    pub min_slack: f64,
    /// Offending instances serialised in full.
    pub failures: Vec<serde_json::Value>,
}

impl TheoryReport {
    pub fn all_passed(&self) -> bool {
        self.bound_violations == 0
            && self.lemma1_failures == 0
            && self.lemma2_violations == 0
            && self.lemma3_violations == 0
            && self.k_eta_non_monotone == 0
    }
}

pub const LEMMA1_TOL: f64 = 1e-8;

pub fn verify_theorem1<R: Rng + ?Sized>(
    n_instances: usize,
    ranges: &InstanceRanges,
    rng: &mut R,
) -> Result<TheoryReport> {
    if ranges.states.0 == 0 || ranges.actions.0 == 0 {
        return Err(Error::InvalidArgument("instance sizes must be at least 1".into()));
    }
    let mut rep = TheoryReport {
        min_slack: f64::INFINITY,
        ..Default::default()
    };
    for _ in 0..n_instances {
        let inst = random_instance(ranges, rng);
        let out = check_instance(&inst)?;
        rep.instances += 1;
        let slack = out.bound - out.v_hat;
        rep.min_slack = rep.min_slack.min(slack);
        let bound_bad = slack < -1e-12 * (1.0 + out.bound);
        let lemma1_bad = out.lemma1_error > LEMMA1_TOL;
        rep.bound_violations += bound_bad as usize;
        rep.lemma1_failures += lemma1_bad as usize;
        rep.lemma1_max_error = rep.lemma1_max_error.max(out.lemma1_error);
        rep.lemma2_violations += out.lemma2_violations;
        rep.lemma3_violations += out.lemma3_violations;
        rep.k_eta_non_monotone += (!out.k_eta_monotone) as usize;
        if bound_bad || lemma1_bad || out.lemma2_violations > 0 || out.lemma3_violations > 0 || !out.k_eta_monotone {
            rep.failures.push(serde_json::json!({ "instance": inst, "outcome": out }));
        }
    }
    Ok(rep)
}
