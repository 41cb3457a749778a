use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// One line of the metrics stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    pub split: Split,
    pub episodes: usize,
    pub episodic_return: f64,
    pub episodic_cost: f64,
    pub success_rate: f64,
    /// Mean takeovers per episode.
    pub intervention_frequency: f64,
    pub mean_velocity: f64,
    pub lambda: f64,
    pub delta: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub critic_loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cql_gap: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub actor_loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub qc_loss: Option<f64>,
}

impl MetricsRecord {
    pub fn check(&self) -> Result<()> {
        let vals = [
            self.episodic_return,
            self.episodic_cost,
            self.success_rate,
            self.intervention_frequency,
            self.mean_velocity,
            self.lambda,
            self.delta,
        ];
        if !vals.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite(format!("metrics record at step {}", self.step)));
        }
        if !(0.0..=1.0).contains(&self.success_rate) {
            return Err(Error::InvalidArgument(format!(
                "success rate {} outside [0, 1]",
                self.success_rate
            )));
        }
        Ok(())
    }
}

/// Per-episode training statistics.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpisodeStats {
    /// Global environment step at which the episode ended.
    pub end_step: usize,
    pub length: usize,
    pub episodic_return: f64,
    pub cost: f64,
    pub interventions: f64,
    pub discounted_interventions: f64,
    pub discounted_cost: f64,
    pub mean_velocity: f64,
    pub success: bool,
}

/// Episode averages in the record layout.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSummary {
    pub episodes: usize,
    pub episodic_return: f64,
    pub episodic_cost: f64,
    pub success_rate: f64,
    pub intervention_frequency: f64,
    pub mean_velocity: f64,
}

impl EpisodeSummary {
    pub fn of(eps: &[EpisodeStats]) -> Self {
        if eps.is_empty() {
            return Self::default();
        }
        let n = eps.len() as f64;
        let mean = |f: &dyn Fn(&EpisodeStats) -> f64| eps.iter().map(f).sum::<f64>() / n;
        Self {
            episodes: eps.len(),
            episodic_return: mean(&|e| e.episodic_return),
            episodic_cost: mean(&|e| e.cost),
            success_rate: mean(&|e| e.success as u8 as f64),
            intervention_frequency: mean(&|e| e.interventions),
            mean_velocity: mean(&|e| e.mean_velocity),
        }
    }

    pub fn record(&self, step: usize, split: Split, lambda: f64, delta: f64) -> MetricsRecord {
        MetricsRecord {
            step,
            split,
            episodes: self.episodes,
            episodic_return: self.episodic_return,
            episodic_cost: self.episodic_cost,
            success_rate: self.success_rate,
            intervention_frequency: self.intervention_frequency,
            mean_velocity: self.mean_velocity,
            lambda,
            delta,
            critic_loss: None,
            cql_gap: None,
            actor_loss: None,
            qc_loss: None,
        }
    }
}

/// Append-only JSON-lines writer; keeps an in-memory copy.
pub struct MetricsWriter {
    file: Option<BufWriter<File>>,
    path: Option<PathBuf>,
    pub records: Vec<MetricsRecord>,
}

impl MetricsWriter {
    pub fn memory() -> Self {
        Self {
            file: None,
            path: None,
            records: Vec::new(),
        }
    }

    pub fn create(path: &Path) -> Result<Self> {
        let f = OpenOptions::new().create(true).write(true).truncate(true).open(path)?;
        Ok(Self {
            file: Some(BufWriter::new(f)),
            path: Some(path.to_path_buf()),
            records: Vec::new(),
        })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn push(&mut self, rec: MetricsRecord) -> Result<()> {
        rec.check()?;
        if let Some(last) = self.records.last() {
            if rec.step < last.step || (rec.step == last.step && rec.split == last.split) {
                return Err(Error::InvalidArgument(format!(
                    "metrics stream must be monotone: step {} after {}",
                    rec.step, last.step
                )));
            }
        }
        if let Some(f) = self.file.as_mut() {
            serde_json::to_writer(&mut *f, &rec)?;
            f.write_all(b"\n")?;
            f.flush()?;
        }
        self.records.push(rec);
        Ok(())
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let f = File::open(path)?;
    let mut out = vec![];
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            msg: format!("line {}: {e}", i + 1),
        })?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(step: usize, split: Split) -> MetricsRecord {
        EpisodeSummary::default().record(step, split, 0.0, 0.0)
    }

    #[test]
    fn jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        let mut w = MetricsWriter::create(&p).unwrap();
        let mut r = rec(5, Split::Train);
        r.critic_loss = Some(1.5);
        w.push(r).unwrap();
        w.push(rec(5, Split::Test)).unwrap();
        w.push(rec(10, Split::Train)).unwrap();
        assert_eq!(read_metrics(&p).unwrap(), w.records);
    }

    #[test]
    fn stream_is_monotone() {
        let mut w = MetricsWriter::memory();
        w.push(rec(10, Split::Train)).unwrap();
        assert!(w.push(rec(5, Split::Train)).is_err());
        assert!(w.push(rec(10, Split::Train)).is_err());
    }

    #[test]
    fn non_finite_rejected() {
        let mut r = rec(1, Split::Train);
        r.lambda = f64::NAN;
        assert!(MetricsWriter::memory().push(r).is_err());
    }

    #[test]
    fn summary_means() {
        let e = |c: f64, s: bool| EpisodeStats {
            cost: c,
            success: s,
            ..Default::default()
        };
        let s = EpisodeSummary::of(&[e(1.0, true), e(3.0, false)]);
        assert_eq!(s.episodic_cost, 2.0);
        assert_eq!(s.success_rate, 0.5);
    }
}
