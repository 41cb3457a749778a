//! Replay storage, critic/actor/intervention losses and the multiplier.

mod agent;
mod buffer;
mod lagrangian;
pub mod losses;

pub use agent::{ActionSource, Agent, Constraint, IterationMetrics, LearnerConfig, UpdateMetrics};
pub use buffer::{Batch, ReplayBuffer, Transition};
pub use lagrangian::{LagrangianState, LambdaMode, PidGains};

#[cfg(test)]
mod tests;
