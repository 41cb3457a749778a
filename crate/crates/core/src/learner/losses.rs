//! Loss builders on the autodiff graph, plus scalar reference versions.

use ndarray::{Array2, Zip};

use crate::nn::{Graph, NodeId, Real};
use crate::{Error, Result};

/// Entropy-regularised TD target for one transition.
pub fn td_target(reward: f64, done: bool, gamma: f64, q_next: f64, log_prob_next: f64, alpha: f64) -> f64 {
    if done {
        reward
    } else {
        reward + gamma * (q_next - alpha * log_prob_next)
    }
}

/// Row-wise [`td_target`]. `done` holds 0/1.
pub fn td_targets<F: Real>(
    reward: &Array2<F>,
    done: &Array2<F>,
    gamma: f64,
    q_next: &Array2<F>,
    log_prob_next: Option<&Array2<F>>,
    alpha: f64,
) -> Array2<F> {
    let mut y = reward.clone();
    let g = F::lit(gamma);
    let a = F::lit(alpha);
    Zip::indexed(&mut y).for_each(|(i, j), y| {
        let lp = log_prob_next.map_or(F::zero(), |l| l[[i, j]]);
        let cont = F::one() - done[[i, j]];
        *y += cont * g * (q_next[[i, j]] - a * lp);
    });
    y
}

/// `0.5 * mean((q - y)^2)` with `y` held constant.
pub fn td_loss<F: Real>(g: &mut Graph<F>, q: NodeId, y: &Array2<F>) -> Result<NodeId> {
    if y.nrows() == 0 {
        return Err(Error::EmptyBatch("td_loss"));
    }
    let y = g.constant(y.clone());
    let d = g.sub(q, y)?;
    let sq = g.square(d);
    let m = g.mean(sq);
    Ok(g.scale(m, F::lit(0.5)))
}

/// `beta * (mean q_policy - mean q_expert) + td`. Missing expectations
/// (empty demonstration batch) drop the conservative term.
pub fn cql_loss<F: Real>(
    g: &mut Graph<F>,
    beta: f64,
    q_policy: Option<NodeId>,
    q_expert: Option<NodeId>,
    td: NodeId,
) -> Result<NodeId> {
    match (q_policy, q_expert) {
        (Some(qp), Some(qe)) if beta != 0.0 => {
            let mp = g.mean(qp);
            let me = g.mean(qe);
            let gap = g.sub(mp, me)?;
            let gap = g.scale(gap, F::lit(beta));
            g.add(gap, td)
        }
        _ => Ok(td),
    }
}

pub fn cql_value(beta: f64, mean_q_policy: f64, mean_q_expert: f64, td: f64) -> f64 {
    beta * (mean_q_policy - mean_q_expert) + td
}

/// `mean(alpha * log_prob - q)`.
pub fn actor_loss<F: Real>(g: &mut Graph<F>, q: NodeId, log_prob: NodeId, alpha: f64) -> Result<NodeId> {
    let ent = g.scale(log_prob, F::lit(alpha));
    let d = g.sub(ent, q)?;
    Ok(g.mean(d))
}

/// `mean(qc) - limit`.
pub fn penalty_loss<F: Real>(g: &mut Graph<F>, qc: NodeId, limit: f64) -> NodeId {
    let m = g.mean(qc);
    g.add_scalar(m, F::lit(-limit))
}

/// Mean negative Gaussian log-likelihood of pre-squash targets `u`
/// (constant terms dropped).
pub fn gaussian_nll<F: Real>(g: &mut Graph<F>, mean: NodeId, log_std: NodeId, u: &Array2<F>) -> Result<NodeId> {
    let u = g.constant(u.clone());
    let d = g.sub(u, mean)?;
    let nls = g.neg(log_std);
    let inv = g.exp(nls);
    let z = g.mul(d, inv)?;
    let z2 = g.square(z);
    let half = g.scale(z2, F::lit(0.5));
    let per = g.add(half, log_std)?;
    let rows = g.sum_cols(per);
    Ok(g.mean(rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn td_target_examples() {
        assert_eq!(td_target(3.0, true, 0.99, 100.0, -5.0, 0.2), 3.0);
        assert!((td_target(1.0, false, 0.99, 10.0, -1.0, 0.2) - 11.098).abs() < 1e-9);
        assert_eq!(td_target(2.5, false, 0.0, 100.0, -5.0, 0.2), 2.5);
    }

    #[test]
    fn td_targets_match_scalar() {
        let r: Array2<f64> = array![[1.0], [2.0]];
        let d = array![[0.0], [1.0]];
        let q = array![[10.0], [7.0]];
        let lp = array![[-1.0], [3.0]];
        let y = td_targets(&r, &d, 0.99, &q, Some(&lp), 0.2);
        assert!((y[[0, 0]] - 11.098).abs() < 1e-12);
        assert_eq!(y[[1, 0]], 2.0);
    }

    #[test]
    fn td_loss_values() {
        let mut g = Graph::<f64>::new();
        let q = g.variable(array![[0.0]]);
        let l = td_loss(&mut g, q, &array![[2.0]]).unwrap();
        assert_eq!(g.scalar(l), 2.0);

        let mut g = Graph::<f64>::new();
        let q = g.variable(array![[1.0], [-2.0]]);
        let l = td_loss(&mut g, q, &array![[1.0], [-2.0]]).unwrap();
        assert_eq!(g.scalar(l), 0.0);
        let grads = g.backward(l).unwrap();
        assert!(grads.get(q).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn td_loss_rejects_empty() {
        let mut g = Graph::<f64>::new();
        let q = g.variable(Array2::zeros((0, 1)));
        assert!(td_loss(&mut g, q, &Array2::zeros((0, 1))).is_err());
    }

    #[test]
    fn cql_example() {
        assert!((cql_value(3.0, 2.0, 3.0, 0.5) + 2.5).abs() < 1e-12);
        let mut g = Graph::<f64>::new();
        let qp = g.constant(array![[1.0], [3.0]]);
        let qe = g.constant(array![[3.0], [3.0]]);
        let td = g.constant(array![[0.5]]);
        let l = cql_loss(&mut g, 3.0, Some(qp), Some(qe), td).unwrap();
        assert!((g.scalar(l) + 2.5).abs() < 1e-12);
        let l0 = cql_loss(&mut g, 0.0, Some(qp), Some(qe), td).unwrap();
        assert_eq!(l0, td);
        let le = cql_loss(&mut g, 3.0, None, None, td).unwrap();
        assert_eq!(le, td);
    }

    #[test]
    fn penalty_values() {
        let mut g = Graph::<f64>::new();
        let q = g.constant(array![[20.0], [20.0]]);
        let p = penalty_loss(&mut g, q, 20.0);
        assert_eq!(g.scalar(p), 0.0);
        let q = g.constant(array![[21.0], [21.0]]);
        let p = penalty_loss(&mut g, q, 20.0);
        assert_eq!(g.scalar(p), 1.0);
    }
}
