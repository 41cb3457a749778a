use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use super::params::ParamSet;
use super::Real;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

/// Adam with bias-corrected first and second moments.
#[derive(Clone, Debug)]
pub struct Adam<F: Real> {
    pub cfg: AdamConfig,
    m: Vec<Array2<F>>,
    v: Vec<Array2<F>>,
    t: u64,
}

impl<F: Real> Adam<F> {
    pub fn new(cfg: AdamConfig, params: &ParamSet<F>) -> Self {
        let zeros: Vec<_> = params.tensors().iter().map(|t| Array2::zeros(t.dim())).collect();
        Self {
            cfg,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Apply one update. A non-finite gradient rejects the whole step and leaves
    /// both the parameters and the moment estimates untouched.
    pub fn step(&mut self, params: &mut ParamSet<F>, grads: &[Array2<F>]) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::shape(
                format!("{} gradient tensors", params.len()),
                format!("{}", grads.len()),
            ));
        }
        for (i, g) in grads.iter().enumerate() {
            if g.dim() != params.get(i).dim() {
                return Err(Error::shape(
                    format!("{:?}", params.get(i).dim()),
                    format!("{:?}", g.dim()),
                ));
            }
            if !g.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of {}", params.names()[i])));
            }
        }
        self.t += 1;
        let b1 = F::lit(self.cfg.beta1);
        let b2 = F::lit(self.cfg.beta2);
        let one = F::one();
        let bc1 = F::lit(1.0 - self.cfg.beta1.powi(self.t as i32));
        let bc2 = F::lit(1.0 - self.cfg.beta2.powi(self.t as i32));
        let lr = F::lit(self.cfg.lr);
        let eps = F::lit(self.cfg.eps);
        for (i, g) in grads.iter().enumerate() {
            let p = params.get_mut(i);
            Zip::from(p)
                .and(&mut self.m[i])
                .and(&mut self.v[i])
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = b1 * *m + (one - b1) * g;
                    *v = b2 * *v + (one - b2) * g * g;
                    let mh = *m / bc1;
                    let vh = *v / bc2;
                    *p = *p - lr * mh / (vh.sqrt() + eps);
                });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> ParamSet<f64> {
        let mut p = ParamSet::new();
        p.push("x", Array2::from_elem((1, 1), v));
        p
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = scalar(0.7);
        let mut opt = Adam::new(AdamConfig::with_lr(0.1), &p);
        for _ in 0..5 {
            opt.step(&mut p, &[Array2::zeros((1, 1))]).unwrap();
        }
        assert_eq!(p.get(0)[[0, 0]], 0.7);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // Hand-rolled: m1 = 0.1, v1 = 0.001, mhat = 1, vhat = 1 -> dx = -lr / (1 + eps)
        let mut p = scalar(0.0);
        let mut opt = Adam::new(AdamConfig::with_lr(0.1), &p);
        opt.step(&mut p, &[Array2::ones((1, 1))]).unwrap();
        let expected = -0.1 / (1.0 + 1e-8);
        assert!((p.get(0)[[0, 0]] - expected).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_rejected() {
        let mut p = scalar(1.0);
        let mut opt = Adam::new(AdamConfig::default(), &p);
        let err = opt.step(&mut p, &[Array2::from_elem((1, 1), f64::NAN)]);
        assert!(matches!(err, Err(Error::NonFinite(_))));
        assert_eq!(p.get(0)[[0, 0]], 1.0);
        assert_eq!(opt.steps(), 0);
    }

    #[test]
    fn identical_runs_identical_trajectories() {
        let run = || {
            let mut p = scalar(0.3);
            let mut opt = Adam::new(AdamConfig::with_lr(0.01), &p);
            let mut traj = vec![];
            for k in 0..20 {
                let g = Array2::from_elem((1, 1), (k as f64).sin());
                opt.step(&mut p, &[g]).unwrap();
                traj.push(p.get(0)[[0, 0]]);
            }
            traj
        };
        assert_eq!(run(), run());
    }
}
