//! Demonstration datasets: a JSON header line followed by one transition per
//! line.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::rollout::build_scenes;
use crate::expert::ExpertPolicy;
use crate::learner::{ReplayBuffer, Transition};
use crate::rng::{self, Stream};
use crate::sim::{DrivingEnv, EnvConfig, SeedRange};
use crate::{Error, Result};

pub const DATASET_FORMAT: &str = "egpo-demo-v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub format: String,
    /// SHA-256 over the environment, scene range and expert settings.
    pub config_hash: String,
    pub env: EnvConfig,
    pub scenes: SeedRange,
    pub expert: crate::expert::ExpertConfig,
    pub seed: u64,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DemoDataset {
    pub header: DatasetHeader,
    pub transitions: Vec<Transition>,
}

pub fn config_hash(env: &EnvConfig, scenes: &SeedRange, expert: &crate::expert::ExpertConfig) -> String {
    let canon = serde_json::to_string(&(env, scenes, expert)).expect("configs serialise");
    Sha256::digest(canon.as_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Roll out the expert on `scenes` (cycled in order) for exactly `n_steps`
/// transitions. Every transition is a demonstration (`takeover = true`).
pub fn collect_dataset(
    env_cfg: &EnvConfig,
    scenes: &SeedRange,
    expert_cfg: &crate::expert::ExpertConfig,
    n_steps: usize,
    seed: u64,
) -> Result<DemoDataset> {
    if n_steps == 0 {
        return Err(Error::InvalidArgument("n_steps must be at least 1".into()));
    }
    let expert = ExpertPolicy::new(expert_cfg.clone())?;
    let scene_list = build_scenes(env_cfg, scenes);
    let mut r = rng::stream(seed, Stream::Expert);
    let mut env = DrivingEnv::new(env_cfg.clone(), scene_list[0].clone());
    let mut obs = env.reset().to_f32();
    let mut episode = 0;
    let mut out = Vec::with_capacity(n_steps);
    while out.len() < n_steps {
        let dist = expert.distribution(&env.context());
        let a = dist.sample(&mut r);
        let step = env.step([a[0], a[1]])?;
        let next = step.observation.to_f32();
        let a32 = [a[0] as f32, a[1] as f32];
        out.push(Transition {
            obs: std::mem::take(&mut obs),
            agent_action: a32,
            applied_action: a32,
            reward: step.reward as f32,
            cost: step.cost as f32,
            intervention: 1.0,
            next_obs: next.clone(),
            done: step.terminal(),
            takeover: true,
            expert_mean: [dist.mean[0] as f32, dist.mean[1] as f32],
            expert_std: [dist.std[0] as f32, dist.std[1] as f32],
        });
        if step.done {
            episode += 1;
            obs = env.reset_with(scene_list[episode % scene_list.len()].clone()).to_f32();
        } else {
            obs = next;
        }
    }
    Ok(DemoDataset {
        header: DatasetHeader {
            format: DATASET_FORMAT.into(),
            config_hash: config_hash(env_cfg, scenes, expert_cfg),
            env: env_cfg.clone(),
            scenes: *scenes,
            expert: expert_cfg.clone(),
            seed,
            count: n_steps,
        },
        transitions: out,
    })
}

impl DemoDataset {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer(&mut w, &self.header)?;
        w.write_all(b"\n")?;
        for t in &self.transitions {
            serde_json::to_writer(&mut w, t)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let fmt = |msg: String| Error::Format {
            path: path.to_path_buf(),
            msg,
        };
        let mut lines = BufReader::new(File::open(path)?).lines();
        let first = lines.next().ok_or_else(|| fmt("empty file".into()))??;
        let header: DatasetHeader = serde_json::from_str(&first).map_err(|e| fmt(format!("header: {e}")))?;
        if header.format != DATASET_FORMAT {
            return Err(fmt(format!("unknown format `{}`", header.format)));
        }
        if header.config_hash != config_hash(&header.env, &header.scenes, &header.expert) {
            return Err(fmt("header hash does not match its configuration".into()));
        }
        let mut transitions = Vec::with_capacity(header.count);
        for (i, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let t: Transition = serde_json::from_str(&line).map_err(|e| fmt(format!("record {}: {e}", i + 1)))?;
            t.validate()?;
            transitions.push(t);
        }
        if transitions.len() != header.count {
            return Err(fmt(format!(
                "header announces {} records, found {}",
                header.count,
                transitions.len()
            )));
        }
        Ok(Self { header, transitions })
    }

    pub fn to_buffer(&self) -> Result<ReplayBuffer> {
        let dim = self.transitions.first().map_or(0, |t| t.obs.len());
        let mut b = ReplayBuffer::new(self.transitions.len().max(1), dim)?;
        for t in &self.transitions {
            b.push(t)?;
        }
        Ok(b)
    }

    /// Fraction of transitions with a collision or road-exit cost.
    pub fn unsafe_step_rate(&self) -> f64 {
        let n = self.transitions.len().max(1) as f64;
        self.transitions.iter().filter(|t| t.cost > 0.0).count() as f64 / n
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expert::ExpertConfig;

    fn small() -> DemoDataset {
        collect_dataset(
            &EnvConfig::default(),
            &SeedRange { start: 0, count: 5 },
            &ExpertConfig::default(),
            1000,
            3,
        )
        .unwrap()
    }

    #[test]
    fn exact_count_and_round_trip() {
        let d = small();
        assert_eq!(d.transitions.len(), 1000);
        assert_eq!(d.header.count, 1000);
        assert!(d.transitions.iter().all(|t| t.takeover));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("demo.jsonl");
        d.save(&p).unwrap();
        assert_eq!(DemoDataset::load(&p).unwrap(), d);
    }

    #[test]
    fn tampered_header_is_rejected() {
        let d = small();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("demo.jsonl");
        d.save(&p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        let text = text.replacen("\"target_speed\":8.0", "\"target_speed\":9.0", 1);
        std::fs::write(&p, text).unwrap();
        assert!(DemoDataset::load(&p).is_err());
    }

    #[test]
    fn zero_steps_rejected() {
        let r = collect_dataset(
            &EnvConfig::default(),
            &SeedRange { start: 0, count: 1 },
            &ExpertConfig::default(),
            0,
            0,
        );
        assert!(r.is_err());
    }
}
