use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::train::RunSummary;
use crate::{Error, Result};

/// Mean and sample standard deviation across seeds.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    pub fn of(xs: &[f64]) -> Self {
        if xs.is_empty() {
            return Self::default();
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let std = if xs.len() > 1 {
            (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self { mean, std }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub label: String,
    pub runs: usize,
    pub train_cost: Stat,
    pub train_interventions: Stat,
    pub test_return: Stat,
    pub test_cost: Stat,
    pub test_success: Stat,
    pub test_velocity: Stat,
}

/// Every `summary.json` under `root` (depth-first, sorted).
pub fn find_summaries(root: &Path) -> Result<Vec<PathBuf>> {
    let mut out = vec![];
    if root.is_file() {
        out.push(root.to_path_buf());
        return Ok(out);
    }
    let mut entries: Vec<_> = std::fs::read_dir(root)?.collect::<std::io::Result<_>>()?;
    entries.sort_by_key(|e| e.path());
    for e in entries {
        let p = e.path();
        if p.is_dir() {
            out.extend(find_summaries(&p)?);
        } else if p.file_name().is_some_and(|n| n == "summary.json") {
            out.push(p);
        }
    }
    Ok(out)
}

pub fn load_summary(path: &Path) -> Result<RunSummary> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

/// Group runs by label; test metrics are averaged over the final `window`
/// fraction of each run, training metrics over the whole run.
pub fn aggregate(runs: &[RunSummary], window: f64) -> Vec<ReportRow> {
    let mut groups: BTreeMap<&str, Vec<&RunSummary>> = BTreeMap::new();
    for r in runs {
        groups.entry(r.label.as_str()).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|(label, rs)| {
            let col = |f: &dyn Fn(&RunSummary) -> f64| Stat::of(&rs.iter().map(|r| f(r)).collect::<Vec<_>>());
            ReportRow {
                label: label.to_string(),
                runs: rs.len(),
                train_cost: col(&|r| r.mean_train_cost()),
                train_interventions: col(&|r| r.train_window(0.0, 1.0).intervention_frequency),
                test_return: col(&|r| r.final_test_window(window).episodic_return),
                test_cost: col(&|r| r.final_test_window(window).episodic_cost),
                test_success: col(&|r| r.final_test_window(window).success_rate),
                test_velocity: col(&|r| r.final_test_window(window).mean_velocity),
            }
        })
        .collect()
}

/// Plain-text table, one row per label.
pub fn render(rows: &[ReportRow]) -> String {
    let mut s = format!(
        "{:<40} {:>4} {:>15} {:>15} {:>15} {:>15} {:>15}\n",
        "label", "runs", "train_cost", "train_interv", "test_success", "test_cost", "test_return"
    );
    let f = |x: &Stat| format!("{:.3}±{:.3}", x.mean, x.std);
    for r in rows {
        s.push_str(&format!(
            "{:<40} {:>4} {:>15} {:>15} {:>15} {:>15} {:>15}\n",
            r.label,
            r.runs,
            f(&r.train_cost),
            f(&r.train_interventions),
            f(&r.test_success),
            f(&r.test_cost),
            f(&r.test_return)
        ));
    }
    s
}
