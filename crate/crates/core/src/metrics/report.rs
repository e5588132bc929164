use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::evaluate::TaskResults;
use super::ranking::Task;
use crate::error::{Error, Result};

/// Summary of a λ trajectory.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LambdaSummary {
    pub initial: f64,
    pub last: f64,
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    pub steps: usize,
}

impl LambdaSummary {
    pub fn from_trajectory(values: &[f64]) -> Option<Self> {
        let (&initial, &last) = (values.first()?, values.last()?);
        Some(Self {
            initial,
            last,
            min: values.iter().copied().fold(f64::INFINITY, f64::min),
            max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            mean: values.iter().sum::<f64>() / values.len() as f64,
            steps: values.len(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub config_hash: String,
    pub seed: u64,
    pub split: String,
    pub lambda: Option<LambdaSummary>,
    /// Task name → metric name → value.
    pub results: BTreeMap<String, BTreeMap<String, f64>>,
    pub zero_relevance_queries: BTreeMap<String, usize>,
}

impl MetricsReport {
    pub fn new(results: TaskResults, config_hash: &str, seed: u64, split: &str, lambda: Option<LambdaSummary>) -> Result<Self> {
        for (task, metrics) in &results.values {
            if let Some((m, v)) = metrics.iter().find(|(_, v)| !(0.0..=1.0).contains(*v)) {
                return Err(Error::Contract(format!("{task} {m} = {v} outside [0, 1]")));
            }
        }
        Ok(Self {
            config_hash: config_hash.into(),
            seed,
            split: split.into(),
            lambda,
            results: results.values,
            zero_relevance_queries: results.zero_relevance,
        })
    }

    pub fn get(&self, task: Task, metric: &str) -> Option<f64> {
        self.results.get(task.name())?.get(metric).copied()
    }

    fn ordered(&self) -> impl Iterator<Item = (&'static str, &BTreeMap<String, f64>)> {
        Task::ALL
            .into_iter()
            .filter_map(|t| self.results.get(t.name()).map(|m| (t.name(), m)))
    }

    /// One `task,metric,value` row per result.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("task,metric,value\n");
        for (task, metrics) in self.ordered() {
            for (m, v) in sorted_metrics(metrics) {
                let _ = writeln!(s, "{task},{m},{v:.6}");
            }
        }
        s
    }

    /// Tasks as column groups, metrics as columns, values in percent.
    pub fn to_markdown(&self) -> String {
        let groups: Vec<(&str, Vec<(&String, f64)>)> = self.ordered().map(|(t, m)| (t, sorted_metrics(m))).collect();
        let mut s = String::new();
        let mut head = String::from("|");
        let mut rule = String::from("|");
        let mut row = String::from("|");
        for (task, metrics) in &groups {
            for (m, v) in metrics {
                let _ = write!(head, " {task} {m} |");
                rule.push_str("---:|");
                let _ = write!(row, " {:.1} |", v * 100.0);
            }
        }
        let _ = writeln!(s, "{head}\n{rule}\n{row}");
        let _ = writeln!(s, "\nconfig `{}`, seed {}, split {}", self.config_hash, self.seed, self.split);
        if let Some(l) = &self.lambda {
            let _ = writeln!(s, "λ final {:.4} (min {:.4}, max {:.4}, {} steps)", l.last, l.min, l.max, l.steps);
        }
        s
    }

    /// Writes `metrics.json`, `metrics.csv` and `metrics.md` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("metrics.json"), serde_json::to_string_pretty(self)? + "\n")?;
        fs::write(dir.join("metrics.csv"), self.to_csv())?;
        fs::write(dir.join("metrics.md"), self.to_markdown())?;
        Ok(())
    }
}

/// Metrics ordered by kind then cutoff: R@1, R@5, R@10 or NDCG@10, NDCG@20, NDCG@50.
fn sorted_metrics(m: &BTreeMap<String, f64>) -> Vec<(&String, f64)> {
    let mut v: Vec<(&String, f64)> = m.iter().map(|(k, v)| (k, *v)).collect();
    let key = |s: &str| {
        let (kind, k) = s.split_once('@').unwrap_or((s, "0"));
        (kind.to_string(), k.parse::<usize>().unwrap_or(0))
    };
    v.sort_by_key(|(k, _)| key(k));
    v
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> MetricsReport {
        let mut r = TaskResults::default();
        let i2t = r.values.entry("I2T".into()).or_default();
        i2t.insert("R@10".into(), 0.9);
        i2t.insert("R@1".into(), 0.5);
        i2t.insert("R@5".into(), 0.75);
        r.values.entry("T2T".into()).or_default().insert("NDCG@10".into(), 0.66);
        MetricsReport::new(r, "abc", 3, "test", LambdaSummary::from_trajectory(&[0.5, 0.4, 0.3])).unwrap()
    }

    #[test]
    fn csv_rows_are_ordered() {
        assert_eq!(
            sample().to_csv(),
            "task,metric,value\nI2T,R@1,0.500000\nI2T,R@5,0.750000\nI2T,R@10,0.900000\nT2T,NDCG@10,0.660000\n"
        );
    }

    #[test]
    fn markdown_has_one_column_per_metric() {
        let md = sample().to_markdown();
        let first = md.lines().next().unwrap();
        assert_eq!(first.matches('|').count(), 5);
        assert!(md.contains("| 50.0 |"));
        assert!(md.contains("λ final 0.3000"));
    }

    #[test]
    fn out_of_range_values_are_rejected() {
        let mut r = TaskResults::default();
        r.values.entry("I2T".into()).or_default().insert("R@1".into(), 1.5);
        assert!(MetricsReport::new(r, "", 0, "test", None).is_err());
    }

    #[test]
    fn lambda_summary() {
        let s = LambdaSummary::from_trajectory(&[0.5, 0.2, 0.3]).unwrap();
        assert_eq!((s.initial, s.last, s.min, s.max, s.steps), (0.5, 0.3, 0.2, 0.5, 3));
        assert!(LambdaSummary::from_trajectory(&[]).is_none());
    }
}
