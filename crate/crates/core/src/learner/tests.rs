use ndarray::{array, Array2};
use rand::Rng as _;

use super::losses::{actor_loss, penalty_loss, td_loss};
use super::*;
use crate::nn::policy::standard_normal;
use crate::nn::{Activation, Graph, ParamSet};
use crate::rng;

fn small_cfg() -> LearnerConfig {
    LearnerConfig {
        hidden: vec![8, 8],
        activation: Activation::Tanh,
        batch_size: 16,
        demo_batch_size: 8,
        warmup_steps: 0,
        learning_rate: 1e-3,
        ..LearnerConfig::default()
    }
}

fn random_buffer(n: usize, obs_dim: usize, p_takeover: f64, seed: u64) -> ReplayBuffer {
    let mut b = ReplayBuffer::new(n, obs_dim).unwrap();
    let mut r = rng::derive(seed, 0);
    for _ in 0..n {
        let obs: Vec<f32> = (0..obs_dim).map(|_| r.random_range(-1.0..1.0)).collect();
        let next_obs: Vec<f32> = (0..obs_dim).map(|_| r.random_range(-1.0..1.0)).collect();
        let take = r.random_bool(p_takeover);
        let a = [r.random_range(-0.9..0.9), r.random_range(-0.9..0.9)];
        b.push(&Transition {
            obs,
            agent_action: a,
            applied_action: if take { [0.7, 0.7] } else { a },
            reward: r.random_range(-1.0..1.0),
            cost: if r.random_bool(0.1) { 1.0 } else { 0.0 },
            intervention: if take { 1.0 } else { 0.0 },
            next_obs,
            done: r.random_bool(0.05),
            takeover: take,
            expert_mean: [0.9, 0.9],
            expert_std: [0.1, 0.1],
        })
        .unwrap();
    }
    b
}

/// Max relative error between analytic `grad` and central differences of `f`.
fn fd_error(params: &ParamSet<f64>, grad: &[f64], f: impl Fn(&ParamSet<f64>) -> f64) -> f64 {
    let flat = params.flat();
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for i in 0..flat.len() {
        let mut p = params.clone();
        let mut x = flat.clone();
        x[i] += h;
        p.set_flat(&x).unwrap();
        let up = f(&p);
        x[i] -= 2.0 * h;
        p.set_flat(&x).unwrap();
        let dn = f(&p);
        let num = (up - dn) / (2.0 * h);
        let err = (num - grad[i]).abs() / num.abs().max(grad[i].abs()).max(1e-3);
        worst = worst.max(err);
    }
    worst
}

fn flat_grads(g: Vec<Array2<f64>>) -> Vec<f64> {
    g.into_iter().flat_map(|a| a.into_iter()).collect()
}

#[test]
fn critic_gradient_matches_finite_differences() {
    let agent = Agent::<f64>::new(3, small_cfg(), 1).unwrap();
    let buf = random_buffer(32, 3, 0.0, 1);
    let batch: Batch<f64> = buf.gather((0..32).collect());
    let y = Array2::from_shape_fn((32, 1), |(i, _)| (i as f64 * 0.37).sin());
    let loss = |p: &ParamSet<f64>, want_grad: bool| {
        let mut g = Graph::new();
        let h = p.bind(&mut g, true);
        let o = g.constant(batch.obs.clone());
        let a = g.constant(batch.applied_action.clone());
        let q = agent.q1.forward(&mut g, &h, o, a).unwrap();
        let l = td_loss(&mut g, q, &y).unwrap();
        let v = g.scalar(l);
        let grads = want_grad.then(|| g.backward(l).unwrap().collect(&h));
        (v, grads)
    };
    let (_, grads) = loss(agent.q1.params(), true);
    let err = fd_error(agent.q1.params(), &flat_grads(grads.unwrap()), |p| loss(p, false).0);
    assert!(err < 1e-4, "relative error {err}");
}

#[test]
fn actor_gradient_matches_finite_differences() {
    let agent = Agent::<f64>::new(3, small_cfg(), 2).unwrap();
    let buf = random_buffer(16, 3, 0.0, 2);
    let batch: Batch<f64> = buf.gather((0..16).collect());
    let xi: Array2<f64> = standard_normal((16, 2), &mut rng::derive(2, 9));
    let loss = |p: &ParamSet<f64>, want_grad: bool| {
        let mut g = Graph::new();
        let hp = p.bind(&mut g, true);
        let h1 = agent.q1.params().bind(&mut g, false);
        let h2 = agent.q2.params().bind(&mut g, false);
        let o = g.constant(batch.obs.clone());
        let s = agent.policy.sample(&mut g, &hp, o, xi.clone()).unwrap();
        let q1 = agent.q1.forward(&mut g, &h1, o, s.action).unwrap();
        let q2 = agent.q2.forward(&mut g, &h2, o, s.action).unwrap();
        let q = g.min(q1, q2).unwrap();
        let l = actor_loss(&mut g, q, s.log_prob, 0.2).unwrap();
        let v = g.scalar(l);
        let grads = want_grad.then(|| g.backward(l).unwrap().collect(&hp));
        (v, grads)
    };
    let (_, grads) = loss(&agent.policy.params, true);
    let err = fd_error(&agent.policy.params, &flat_grads(grads.unwrap()), |p| loss(p, false).0);
    assert!(err < 1e-4, "relative error {err}");
}

/// Gradients of `L_pi` and of the penalty, and of `L_pi + lambda * penalty`.
fn actor_grads(agent: &Agent<f64>, batch: &Batch<f64>, xi: &Array2<f64>, lambda: Option<f64>) -> Vec<f64> {
    let mut g = Graph::new();
    let hp = agent.policy.params.bind(&mut g, true);
    let h1 = agent.q1.params().bind(&mut g, false);
    let h2 = agent.q2.params().bind(&mut g, false);
    let hc = agent.qc.params().bind(&mut g, false);
    let o = g.constant(batch.obs.clone());
    let s = agent.policy.sample(&mut g, &hp, o, xi.clone()).unwrap();
    let q1 = agent.q1.forward(&mut g, &h1, o, s.action).unwrap();
    let q2 = agent.q2.forward(&mut g, &h2, o, s.action).unwrap();
    let q = g.min(q1, q2).unwrap();
    let lpi = actor_loss(&mut g, q, s.log_prob, agent.cfg.alpha).unwrap();
    let qc = agent.qc.forward(&mut g, &hc, o, s.action).unwrap();
    let pen = penalty_loss(&mut g, qc, 20.0);
    let loss = match lambda {
        None => pen,
        Some(0.0) => lpi,
        Some(l) => {
            let w = g.scale(pen, l);
            g.add(lpi, w).unwrap()
        }
    };
    flat_grads(g.backward(loss).unwrap().collect(&hp))
}

#[test]
fn combined_gradient_is_linear() {
    let agent = Agent::<f64>::new(3, small_cfg(), 3).unwrap();
    let buf = random_buffer(16, 3, 0.0, 3);
    let batch: Batch<f64> = buf.gather((0..16).collect());
    let xi: Array2<f64> = standard_normal((16, 2), &mut rng::derive(3, 9));
    let lam = 7.5;
    let gl = actor_grads(&agent, &batch, &xi, Some(0.0));
    let gp = actor_grads(&agent, &batch, &xi, None);
    let gc = actor_grads(&agent, &batch, &xi, Some(lam));
    for i in 0..gc.len() {
        assert!((gc[i] - (gl[i] + lam * gp[i])).abs() < 1e-6);
    }
}

#[test]
fn zero_lambda_update_is_bitwise_plain_actor() {
    let buf = random_buffer(200, 3, 0.3, 4);
    let sac = LearnerConfig {
        beta: 0.0,
        constraint: Constraint::None,
        ..small_cfg()
    };
    let egpo = LearnerConfig {
        beta: 0.0,
        lambda_mode: LambdaMode::Zero,
        ..small_cfg()
    };
    let mut a = Agent::<f32>::new(3, sac, 4).unwrap();
    let mut b = Agent::<f32>::new(3, egpo, 4).unwrap();
    for _ in 0..5 {
        let ma = a.train_iteration(&buf, 20, Some(30.0)).unwrap();
        let mb = b.train_iteration(&buf, 20, Some(30.0)).unwrap();
        assert_eq!(ma.critic_loss.to_bits(), mb.critic_loss.to_bits());
        assert_eq!(ma.actor_loss.to_bits(), mb.actor_loss.to_bits());
    }
    assert_eq!(a.policy.params, b.policy.params);
    assert_eq!(a.q1.params(), b.q1.params());
    assert_eq!(b.lambda(), 0.0);
}

#[test]
fn runs_are_deterministic() {
    let buf = random_buffer(200, 3, 0.3, 5);
    let run = || {
        let mut a = Agent::<f32>::new(3, small_cfg(), 5).unwrap();
        (0..5)
            .map(|i| a.train_iteration(&buf, 10, Some(i as f64 - 2.0)).unwrap())
            .collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

#[test]
fn metrics_stay_finite_and_lambda_non_negative() {
    let buf = random_buffer(300, 3, 0.4, 6);
    let mut a = Agent::<f32>::new(3, small_cfg(), 6).unwrap();
    for i in 0..10 {
        let m = a.train_iteration(&buf, 10, Some(if i < 5 { 10.0 } else { -30.0 })).unwrap();
        assert!(m.lambda >= 0.0);
        for v in [m.critic_loss, m.cql_gap, m.actor_loss, m.qc_loss, m.lambda, m.delta] {
            assert!(v.is_finite());
        }
    }
    assert!(a.all_finite());
}

#[test]
fn large_lambda_pushes_costly_dimension_down() {
    let cfg = LearnerConfig {
        alpha: 0.0,
        learning_rate: 1e-2,
        ..small_cfg()
    };
    let mut agent = Agent::<f64>::new(3, cfg, 7).unwrap();
    // zero reward critics: flat landscape
    for q in [&mut agent.q1, &mut agent.q2] {
        let n = q.params().num_scalars();
        q.params_mut().set_flat(&vec![0.0; n]).unwrap();
    }
    // Q^C = 10 * (a0 + 1) through the first hidden unit of each layer
    let p = agent.qc.params_mut();
    let n = p.num_scalars();
    p.set_flat(&vec![0.0; n]).unwrap();
    p.get_mut(0)[[3, 0]] = 1.0; // input column 3 is a0
    p.get_mut(1)[[0, 0]] = 1.0;
    p.get_mut(2)[[0, 0]] = 1.0;
    p.get_mut(4)[[0, 0]] = 10.0;
    agent.lagrangian = LagrangianState::with_lambda(100.0);
    agent.cfg.lambda_mode = LambdaMode::Fixed(100.0);
    let buf = random_buffer(64, 3, 0.0, 7);
    let probe: Array2<f64> = Array2::from_shape_fn((64, 3), |(i, j)| buf.get(i).unwrap().obs[j] as f64);
    let mean_a0 = |a: &Agent<f64>| a.policy.deterministic_action(&probe).unwrap().column(0).mean().unwrap();
    let before = mean_a0(&agent);
    let batch: Batch<f64> = buf.gather((0..64).collect());
    let empty = buf.gather(Vec::new());
    for _ in 0..20 {
        agent.update_on(&batch, &empty).unwrap();
    }
    let after = mean_a0(&agent);
    assert!(after < before - 0.05, "{before} -> {after}");
}

#[test]
fn quadratic_critic_pulls_mean_to_peak() {
    let agent = Agent::<f64>::new(3, small_cfg(), 8).unwrap();
    let mut policy = agent.policy.clone();
    let target = array![[0.5, -0.3]];
    let obs: Array2<f64> = standard_normal((32, 3), &mut rng::derive(8, 1));
    let mut opt = crate::nn::Adam::new(crate::nn::AdamConfig::with_lr(1e-2), &policy.params);
    let mut r = rng::derive(8, 2);
    let mut losses = vec![];
    for _ in 0..100 {
        let xi: Array2<f64> = standard_normal((32, 2), &mut r);
        let mut g = Graph::new();
        let hp = policy.params.bind(&mut g, true);
        let o = g.constant(obs.clone());
        let s = policy.sample(&mut g, &hp, o, xi).unwrap();
        let t = g.constant(Array2::from_shape_fn((32, 2), |(_, j)| target[[0, j]]));
        let d = g.sub(s.action, t).unwrap();
        let sq = g.square(d);
        let sq = g.sum_cols(sq);
        let q = g.neg(sq);
        let l = actor_loss(&mut g, q, s.log_prob, 0.0).unwrap();
        losses.push(g.scalar(l));
        let gr = g.backward(l).unwrap().collect(&hp);
        opt.step(&mut policy.params, &gr).unwrap();
    }
    let avg = |w: &[f64]| w.iter().sum::<f64>() / w.len() as f64;
    for k in 0..9 {
        assert!(avg(&losses[10 * (k + 1)..10 * (k + 2)]) <= avg(&losses[10 * k..10 * (k + 1)]) + 1e-3);
    }
    let mean = policy.deterministic_action(&obs).unwrap();
    for j in 0..2 {
        let m = mean.column(j).mean().unwrap();
        assert!((m - target[[0, j]]).abs() < 0.1, "dim {j}: {m}");
    }
}

#[test]
fn flat_critic_gives_flat_actor_gradient() {
    let mut agent = Agent::<f64>::new(3, LearnerConfig { alpha: 0.0, ..small_cfg() }, 9).unwrap();
    for q in [&mut agent.q1, &mut agent.q2] {
        let n = q.params().num_scalars();
        let mut v = vec![0.0; n];
        *v.last_mut().unwrap() = 3.0; // output bias only
        q.params_mut().set_flat(&v).unwrap();
    }
    let buf = random_buffer(16, 3, 0.0, 9);
    let batch: Batch<f64> = buf.gather((0..16).collect());
    let xi: Array2<f64> = standard_normal((16, 2), &mut rng::derive(9, 9));
    let g = actor_grads(&agent, &batch, &xi, Some(0.0));
    assert!(g.iter().all(|v| v.abs() < 1e-12));
}

/// Two states, a fixed zero action and exact empirical takeover frequencies.
#[test]
fn intervention_critic_matches_dynamic_programming() {
    let gamma = 0.5;
    let p_take = [0.2, 0.6];
    // P(s'|s)
    let trans = [[0.7, 0.3], [0.4, 0.6]];
    // Q(s) = c(s) + gamma * sum P Q
    let a = nalgebra::Matrix2::new(
        1.0 - gamma * trans[0][0],
        -gamma * trans[0][1],
        -gamma * trans[1][0],
        1.0 - gamma * trans[1][1],
    );
    let truth = a.lu().solve(&nalgebra::Vector2::new(p_take[0], p_take[1])).unwrap();

    let n_per = 100;
    let mut buf = ReplayBuffer::new(2 * n_per, 2).unwrap();
    for s in 0..2 {
        for k in 0..n_per {
            let take = (k as f64) < p_take[s] * n_per as f64;
            let s_next = if (k % 10) as f64 / 10.0 < trans[s][0] { 0 } else { 1 };
            let onehot = |i: usize| if i == 0 { vec![1.0, 0.0] } else { vec![0.0, 1.0] };
            let act = [0.0, 0.0];
            buf.push(&Transition {
                obs: onehot(s),
                agent_action: act,
                applied_action: if take { [0.0, 0.0] } else { act },
                reward: 0.0,
                cost: 0.0,
                intervention: if take { 1.0 } else { 0.0 },
                next_obs: onehot(s_next),
                done: false,
                takeover: take,
                expert_mean: [0.0, 0.0],
                expert_std: [0.3, 0.3],
            })
            .unwrap();
        }
    }
    let cfg = LearnerConfig {
        gamma,
        tau: 0.05,
        beta: 0.0,
        learning_rate: 3e-3,
        lambda_mode: LambdaMode::Zero,
        hidden: vec![16, 16],
        ..small_cfg()
    };
    let mut agent = Agent::<f64>::new(2, cfg, 10).unwrap();
    // deterministic zero-action policy: Q^C reduces to a table over states
    let p = &mut agent.policy.params;
    let n = p.num_scalars();
    p.set_flat(&vec![0.0; n]).unwrap();
    let last = p.len() - 1;
    p.get_mut(last).fill(-20.0);
    let all: Batch<f64> = buf.gather((0..2 * n_per).collect());
    let empty = buf.gather(Vec::new());
    for _ in 0..3000 {
        agent.update_on(&all, &empty).unwrap();
    }
    for (s, want) in truth.iter().enumerate() {
        let obs = if s == 0 { array![[1.0, 0.0]] } else { array![[0.0, 1.0]] };
        let q = agent.qc.forward_array(&obs, &array![[0.0, 0.0]]).unwrap()[[0, 0]];
        assert!((q - want).abs() < 0.01, "state {s}: {q} vs {want}");
    }
}

fn measured_gap(agent: &Agent<f64>, buf: &ReplayBuffer) -> f64 {
    let demo: Batch<f64> = buf.gather((0..buf.len()).filter(|&i| buf.is_takeover(i)).collect());
    let mut r = rng::derive(99, 0);
    let (a_pi, _) = agent.policy.sample_array(&demo.obs, &mut r).unwrap();
    let xi: Array2<f64> = standard_normal(demo.expert_mean.dim(), &mut r);
    let a_e = Array2::from_shape_fn(xi.dim(), |(i, j)| {
        (demo.expert_mean[[i, j]] + demo.expert_std[[i, j]] * xi[[i, j]]).tanh()
    });
    let qe = agent.q1.forward_array(&demo.obs, &a_e).unwrap().mean().unwrap();
    let qp = agent.q1.forward_array(&demo.obs, &a_pi).unwrap().mean().unwrap();
    qe - qp
}

#[test]
fn conservative_term_widens_expert_gap() {
    let buf = random_buffer(300, 3, 0.4, 11);
    let train = |beta: f64| {
        let cfg = LearnerConfig {
            beta,
            lambda_mode: LambdaMode::Zero,
            ..small_cfg()
        };
        let mut a = Agent::<f64>::new(3, cfg, 11).unwrap();
        for _ in 0..300 {
            a.update(&buf).unwrap();
        }
        measured_gap(&a, &buf)
    };
    let with = train(3.0);
    let without = train(0.0);
    assert!(with > without, "beta=3 gap {with}, beta=0 gap {without}");
}

#[test]
fn empty_demo_batch_reduces_to_td() {
    let buf = random_buffer(100, 3, 0.0, 12);
    let mk = |beta| {
        Agent::<f32>::new(
            3,
            LearnerConfig {
                beta,
                constraint: Constraint::None,
                ..small_cfg()
            },
            12,
        )
        .unwrap()
    };
    let mut a = mk(3.0);
    let mut b = mk(0.0);
    for _ in 0..10 {
        let ma = a.update(&buf).unwrap();
        let mb = b.update(&buf).unwrap();
        assert_eq!(ma.critic_loss, mb.critic_loss);
    }
    assert_eq!(a.q1.params(), b.q1.params());
}

#[test]
fn checkpoint_round_trip() {
    let buf = random_buffer(100, 3, 0.3, 13);
    let mut a = Agent::<f32>::new(3, small_cfg(), 13).unwrap();
    a.train_iteration(&buf, 5, Some(4.0)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("agent.ckpt");
    a.save(&path, serde_json::json!({"note": "x"})).unwrap();
    let b = Agent::<f32>::load(&path, 0).unwrap();
    assert_eq!(a.policy.params, b.policy.params);
    assert_eq!(a.qc_target.params(), b.qc_target.params());
    assert_eq!(a.lagrangian, b.lagrangian);
    assert_eq!(a.cfg, b.cfg);
}

#[test]
fn updates_due_respects_warmup_and_ratio() {
    let cfg = LearnerConfig {
        warmup_steps: 100,
        updates_per_step: 0.25,
        ..small_cfg()
    };
    let a = Agent::<f32>::new(3, cfg, 0).unwrap();
    assert_eq!(a.updates_due(50), 0);
    assert_eq!(a.updates_due(100), 0);
    assert_eq!(a.updates_due(140), 10);
}
