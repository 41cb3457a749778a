//! Diagonal Gaussian squashed through `tanh` onto the open box `(-1, 1)^d`.

use rand::Rng;
use rand_distr::StandardNormal;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Largest |a| accepted before an action is treated as lying on the boundary.
pub const EDGE: f64 = 1.0 - 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct SquashedGaussian {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl SquashedGaussian {
    pub fn new(mean: Vec<f64>, std: Vec<f64>) -> Self {
        assert_eq!(mean.len(), std.len());
        debug_assert!(std.iter().all(|&s| s > 0.0));
        Self { mean, std }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.mean
            .iter()
            .zip(&self.std)
            .map(|(&m, &s)| {
                let xi: f64 = rng.sample(StandardNormal);
                clip_open((m + s * xi).tanh())
            })
            .collect()
    }

    /// `tanh(mean)`: the maximiser of the pre-squash density.
    pub fn mean_action(&self) -> Vec<f64> {
        self.mean.iter().map(|m| m.tanh()).collect()
    }

    /// Log-density of the Gaussian evaluated at `atanh(action)`, without the
    /// squash Jacobian. `None` when the action is not strictly inside the box.
    pub fn presquash_log_density(&self, action: &[f64]) -> Option<f64> {
        let mut lp = 0.0;
        for ((&a, &m), &s) in action.iter().zip(&self.mean).zip(&self.std) {
            if !(a.abs() < 1.0) {
                return None;
            }
            let z = (a.atanh() - m) / s;
            lp += -0.5 * z * z - s.ln() - 0.5 * LN_2PI;
        }
        Some(lp)
    }

    pub fn presquash_density(&self, action: &[f64]) -> f64 {
        self.presquash_log_density(action).map_or(0.0, f64::exp)
    }

    /// Peak value of the pre-squash density, reached at [`Self::mean_action`].
    pub fn presquash_max_density(&self) -> f64 {
        self.std
            .iter()
            .map(|s| 1.0 / (s * (2.0 * std::f64::consts::PI).sqrt()))
            .product()
    }

    /// Log-density of the squashed distribution on `(-1, 1)^d`, including the
    /// change-of-variables term `-sum ln(1 - a^2)`.
    pub fn log_density(&self, action: &[f64]) -> Option<f64> {
        let base = self.presquash_log_density(action)?;
        let jac: f64 = action.iter().map(|&a| log_one_minus_tanh_sq(a.atanh())).sum();
        Some(base - jac)
    }

    pub fn density(&self, action: &[f64]) -> f64 {
        self.log_density(action).map_or(0.0, f64::exp)
    }

    /// Mode of the squashed density. Each coordinate solves
    /// `-(u - m) / s^2 + 2 tanh(u) = 0`, which has a single root when `s^2 < 1/2`.
    pub fn mode(&self) -> Vec<f64> {
        self.mean
            .iter()
            .zip(&self.std)
            .map(|(&m, &s)| {
                let s2 = s * s;
                let g = |u: f64| -(u - m) / s2 + 2.0 * u.tanh();
                let (mut lo, mut hi) = (m - 2.0 * s2 - 1.0, m + 2.0 * s2 + 1.0);
                while g(lo) < 0.0 {
                    lo -= 1.0;
                }
                while g(hi) > 0.0 {
                    hi += 1.0;
                }
                for _ in 0..200 {
                    let mid = 0.5 * (lo + hi);
                    if g(mid) > 0.0 {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                (0.5 * (lo + hi)).tanh()
            })
            .collect()
    }
}

/// `ln(1 - tanh(u)^2) = 2 (ln 2 - u - softplus(-2u))`, stable for large |u|.
#[inline]
pub fn log_one_minus_tanh_sq(u: f64) -> f64 {
    2.0 * (std::f64::consts::LN_2 - u - crate::nn::graph::softplus(-2.0 * u))
}

#[inline]
pub fn clip_open(a: f64) -> f64 {
    a.clamp(-EDGE, EDGE)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn quad2(f: impl Fn(&[f64]) -> f64, n: usize) -> f64 {
        let h = 2.0 / n as f64;
        let mut acc = 0.0;
        for i in 0..n {
            for j in 0..n {
                let a = [-1.0 + (i as f64 + 0.5) * h, -1.0 + (j as f64 + 0.5) * h];
                acc += f(&a);
            }
        }
        acc * h * h
    }

    #[test]
    fn squashed_density_integrates_to_one() {
        let d = SquashedGaussian::new(vec![0.3, -0.5], vec![0.3, 0.25]);
        let total = quad2(|a| d.density(a), 400);
        assert!((total - 1.0).abs() < 1e-3, "{total}");
    }

    #[test]
    fn boundary_actions_have_zero_density() {
        let d = SquashedGaussian::new(vec![0.0, 0.0], vec![0.3, 0.3]);
        assert_eq!(d.density(&[1.0, 0.0]), 0.0);
        assert_eq!(d.presquash_density(&[0.0, -1.0]), 0.0);
        assert!(d.log_density(&[0.999, -0.999]).unwrap().is_finite());
    }

    #[test]
    fn presquash_peak_at_mean_action() {
        let d = SquashedGaussian::new(vec![0.4, -0.2], vec![0.3, 0.5]);
        let peak = d.presquash_density(&d.mean_action());
        assert!((peak - d.presquash_max_density()).abs() < 1e-12);
    }

    #[test]
    fn mode_solves_stationarity() {
        let d = SquashedGaussian::new(vec![0.8, -0.1], vec![0.4, 0.2]);
        let mode = d.mode();
        let h = 1e-5;
        for k in 0..2 {
            let mut p = mode.clone();
            p[k] += h;
            let mut m = mode.clone();
            m[k] -= h;
            let slope = (d.log_density(&p).unwrap() - d.log_density(&m).unwrap()) / (2.0 * h);
            assert!(slope.abs() < 1e-4, "{slope}");
        }
    }

    #[test]
    fn samples_stay_inside_box() {
        let d = SquashedGaussian::new(vec![5.0, -5.0], vec![2.0, 2.0]);
        let mut r = rng::derive(3, 3);
        for _ in 0..1000 {
            let a = d.sample(&mut r);
            assert!(a.iter().all(|v| v.abs() < 1.0));
        }
    }
}
