//! Expert-guided policy optimization on a desk-scale driving simulator.
//!
//! The crate is organised bottom-up:
//!
//! * [`sim`]: seeded procedural 2D driving scenes, kinematic bicycle ego,
//!   Frenet progress reward, collision cost events and lidar.
//! * [`expert`]: scripted stochastic expert with sampling and density queries.
//! * [`guardian`]: the takeover switch, the mixed behavior density and the
//!   rule-based switch used for ablation.
//! * [`nn`]: small reverse-mode autodiff, MLPs, squashed Gaussian policy head,
//!   Adam and Polyak averaging.
//! * [`learner`]: replay buffer with takeover index, SAC/CQL/intervention
//!   critic losses and the PID-controlled Lagrange multiplier.
//! * [`theory`]: exact tabular checks of the training-risk bound and lemmas.
//! * [`harness`]: run configuration, training/evaluation loops, baselines,
//!   demonstration datasets and metrics files.

pub mod error;
pub mod expert;
pub mod guardian;
pub mod harness;
pub mod learner;
pub mod nn;
pub mod rng;
pub mod sim;
pub mod theory;

pub use error::{Error, Result};
pub use expert::{ExpertConfig, ExpertPolicy};
pub use guardian::{GuardianConfig, GuardianMode, SwitchOutcome};
pub use learner::{LagrangianState, LearnerConfig, Transition};
pub use sim::{DrivingEnv, EnvConfig, Observation, SceneSpec, StepResult};
