//! Minimal neural-network toolkit: reverse-mode autodiff on 2D arrays, MLPs,
//! a squashed-Gaussian policy head, Q heads, Adam and Polyak averaging.

pub mod checkpoint;
pub mod dist;
pub mod graph;
pub mod optim;
pub mod params;
pub mod policy;
mod real;

pub use checkpoint::Checkpoint;
pub use dist::SquashedGaussian;
pub use graph::{Gradients, Graph, NodeId};
pub use optim::{Adam, AdamConfig};
pub use params::{Activation, Mlp, ParamSet};
pub use policy::{PolicyHead, PolicySample, QNetwork};
pub use real::Real;

/// `target <- tau * source + (1 - tau) * target`.
pub fn polyak_update<F: Real>(target: &mut ParamSet<F>, source: &ParamSet<F>, tau: f64) -> crate::Result<()> {
    target.polyak_from(source, F::lit(tau))
}
