//! Run configuration, training and evaluation loops, baselines, datasets and
//! metrics files.

pub mod config;
pub mod dataset;
pub mod metrics;
pub mod offline;
pub mod report;
pub mod rollout;
pub mod train;

pub use config::{Ablations, Method, RunConfig, Shaping};
pub use dataset::{collect_dataset, DemoDataset};
pub use metrics::{EpisodeStats, EpisodeSummary, MetricsRecord, MetricsWriter, Split};
pub use offline::{run_bc, run_cql_offline, train_offline, BcOptions, BcReport};
pub use rollout::{build_scenes, evaluate_expert, evaluate_policy, EvalResult};
pub use train::{evaluate_checkpoint, train, RunSummary};

use std::path::Path;

/// Train any method, online or offline.
pub fn run(cfg: &RunConfig, out: Option<&Path>) -> crate::Result<(crate::learner::Agent<f32>, RunSummary)> {
    if cfg.method.is_online() {
        train(cfg, out)
    } else {
        train_offline(cfg, out)
    }
}
