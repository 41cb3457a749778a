use ndarray::{concatenate, Array2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;

use super::dist::{SquashedGaussian, EDGE};
use super::graph::{Graph, NodeId};
use super::params::{forward_layers, forward_layers_array, init_linear, Activation, Mlp, ParamSet};
use super::Real;
use crate::Result;

pub const LOG_STD_MIN: f64 = -20.0;
pub const LOG_STD_MAX: f64 = 2.0;
/// Offset added to the log-std head bias at initialisation.
pub const INIT_LOG_STD: f64 = -1.0;
const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

/// Squashed-Gaussian policy: an MLP trunk feeding a mean head and a clamped
/// log-std head.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyHead<F: Real> {
    pub trunk_sizes: Vec<usize>,
    pub act_dim: usize,
    pub activation: Activation,
    pub params: ParamSet<F>,
}

/// Graph nodes produced by a reparameterised draw.
pub struct PolicySample {
    pub action: NodeId,
    /// Per-row log-probability, `n x 1`.
    pub log_prob: NodeId,
    pub mean: NodeId,
    pub log_std: NodeId,
}

impl<F: Real> PolicyHead<F> {
    pub fn new<R: Rng + ?Sized>(
        obs_dim: usize,
        hidden: &[usize],
        act_dim: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        let mut trunk_sizes = vec![obs_dim];
        trunk_sizes.extend_from_slice(hidden);
        let trunk = Mlp::<F>::new(&trunk_sizes, activation, true, rng);
        let mut params = trunk.params;
        let h = *trunk_sizes.last().unwrap();
        let (w, b) = init_linear(h, act_dim, 0.1, rng);
        params.push("mean.w", w);
        params.push("mean.b", b);
        let (w, mut b) = init_linear(h, act_dim, 0.1, rng);
        b.mapv_inplace(|v| v + F::lit(INIT_LOG_STD));
        params.push("log_std.w", w);
        params.push("log_std.b", b);
        Self {
            trunk_sizes,
            act_dim,
            activation,
            params,
        }
    }

    pub fn obs_dim(&self) -> usize {
        self.trunk_sizes[0]
    }

    fn n_trunk(&self) -> usize {
        self.trunk_sizes.len() - 1
    }

    pub fn forward(
        &self,
        g: &mut Graph<F>,
        handles: &[NodeId],
        obs: NodeId,
    ) -> Result<(NodeId, NodeId)> {
        let k = self.n_trunk();
        let h = forward_layers(g, handles, obs, k, self.activation, true)?;
        let m = g.matmul(h, handles[2 * k])?;
        let mean = g.add_bias(m, handles[2 * k + 1])?;
        let s = g.matmul(h, handles[2 * k + 2])?;
        let s = g.add_bias(s, handles[2 * k + 3])?;
        let log_std = g.clamp(s, F::lit(LOG_STD_MIN), F::lit(LOG_STD_MAX));
        Ok((mean, log_std))
    }

    /// Reparameterised sample `a = tanh(mean + std * xi)` with its log-probability,
    /// differentiable w.r.t. the policy parameters.
    pub fn sample(
        &self,
        g: &mut Graph<F>,
        handles: &[NodeId],
        obs: NodeId,
        xi: Array2<F>,
    ) -> Result<PolicySample> {
        let (mean, log_std) = self.forward(g, handles, obs)?;
        let gauss_const = xi.mapv(|x| F::lit(-0.5) * x * x - F::lit(HALF_LN_2PI));
        let xi = g.constant(xi);
        let gauss_const = g.constant(gauss_const);
        let std = g.exp(log_std);
        let noise = g.mul(std, xi)?;
        let u = g.add(mean, noise)?;
        let action = g.tanh(u);
        // log N(u) = -xi^2/2 - log_std - ln(2pi)/2
        let lp = g.sub(gauss_const, log_std)?;
        // - ln(1 - tanh(u)^2) = -2 (ln2 - u - softplus(-2u))
        let m2u = g.scale(u, F::lit(-2.0));
        let sp = g.softplus(m2u);
        let t = g.add(u, sp)?;
        let t = g.add_scalar(t, F::lit(-std::f64::consts::LN_2));
        let corr = g.scale(t, F::lit(2.0));
        let lp = g.add(lp, corr)?;
        let log_prob = g.sum_cols(lp);
        Ok(PolicySample {
            action,
            log_prob,
            mean,
            log_std,
        })
    }

    /// Inference: mean and clamped log-std.
    pub fn forward_array(&self, obs: &Array2<F>) -> Result<(Array2<F>, Array2<F>)> {
        let k = self.n_trunk();
        let h = forward_layers_array(&self.params, 0, obs, k, self.activation, true)?;
        let mut mean = h.dot(self.params.get(2 * k));
        mean += self.params.get(2 * k + 1);
        let mut ls = h.dot(self.params.get(2 * k + 2));
        ls += self.params.get(2 * k + 3);
        ls.mapv_inplace(|v| v.max(F::lit(LOG_STD_MIN)).min(F::lit(LOG_STD_MAX)));
        Ok((mean, ls))
    }

    /// Non-differentiable batch sample: actions and per-row log-probabilities.
    pub fn sample_array<R: Rng + ?Sized>(
        &self,
        obs: &Array2<F>,
        rng: &mut R,
    ) -> Result<(Array2<F>, Array2<F>)> {
        let (mean, ls) = self.forward_array(obs)?;
        let n = mean.nrows();
        let xi = standard_normal::<F, R>((n, self.act_dim), rng);
        Ok(squash_sample(&mean, &ls, &xi))
    }

    pub fn deterministic_action(&self, obs: &Array2<F>) -> Result<Array2<F>> {
        let (mean, _) = self.forward_array(obs)?;
        Ok(mean.mapv(|m| m.tanh()))
    }

    /// Action distribution for a single observation, in `f64`.
    pub fn distribution(&self, obs: &[f64]) -> Result<SquashedGaussian> {
        let x = Array2::from_shape_fn((1, obs.len()), |(_, j)| F::lit(obs[j]));
        let (mean, ls) = self.forward_array(&x)?;
        Ok(SquashedGaussian::new(
            mean.iter().map(|v| v.as_f64()).collect(),
            ls.iter().map(|v| v.as_f64().exp()).collect(),
        ))
    }
}

pub fn standard_normal<F: Real, R: Rng + ?Sized>(shape: (usize, usize), rng: &mut R) -> Array2<F> {
    Array2::from_shape_fn(shape, |_| {
        let v: f64 = rng.sample(StandardNormal);
        F::lit(v)
    })
}

/// `tanh(mean + exp(log_std) * xi)` and its log-probability, row by row.
pub fn squash_sample<F: Real>(
    mean: &Array2<F>,
    log_std: &Array2<F>,
    xi: &Array2<F>,
) -> (Array2<F>, Array2<F>) {
    let (n, d) = mean.dim();
    let mut act = Array2::zeros((n, d));
    let mut lp = Array2::zeros((n, 1));
    let edge = F::lit(EDGE);
    for i in 0..n {
        let mut acc = F::zero();
        for j in 0..d {
            let ls = log_std[[i, j]];
            let x = xi[[i, j]];
            let u = mean[[i, j]] + ls.exp() * x;
            act[[i, j]] = u.tanh().max(-edge).min(edge);
            let corr = F::lit(2.0)
                * (F::lit(std::f64::consts::LN_2) - u - super::graph::softplus(F::lit(-2.0) * u));
            acc = acc + F::lit(-0.5) * x * x - ls - F::lit(HALF_LN_2PI) - corr;
        }
        lp[[i, 0]] = acc;
    }
    (act, lp)
}

/// State-action value network `Q(s, a)`.
#[derive(Clone, Debug, PartialEq)]
pub struct QNetwork<F: Real> {
    pub mlp: Mlp<F>,
    pub obs_dim: usize,
    pub act_dim: usize,
}

impl<F: Real> QNetwork<F> {
    pub fn new<R: Rng + ?Sized>(
        obs_dim: usize,
        hidden: &[usize],
        act_dim: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        let mut sizes = vec![obs_dim + act_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(1);
        Self {
            mlp: Mlp::new(&sizes, activation, false, rng),
            obs_dim,
            act_dim,
        }
    }

    pub fn params(&self) -> &ParamSet<F> {
        &self.mlp.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<F> {
        &mut self.mlp.params
    }

    pub fn forward(
        &self,
        g: &mut Graph<F>,
        handles: &[NodeId],
        obs: NodeId,
        act: NodeId,
    ) -> Result<NodeId> {
        let x = g.concat_cols(obs, act)?;
        self.mlp.forward(g, handles, x)
    }

    pub fn forward_array(&self, obs: &Array2<F>, act: &Array2<F>) -> Result<Array2<F>> {
        if obs.nrows() != act.nrows() {
            return Err(crate::Error::shape(
                format!("{} rows", obs.nrows()),
                format!("{} rows", act.nrows()),
            ));
        }
        let x = concatenate(Axis(1), &[obs.view(), act.view()]).expect("rows checked");
        self.mlp.forward_array(&x)
    }
}
