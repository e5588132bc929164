//! The experiment matrix: baseline against full objective, component
//! ablations, structure-metric variants, hyperparameter sweeps and the
//! strong/weak single-modal distillation probe.
//!
//! Every run trains from `(config, seed)` only, so runs are independent and
//! execute in parallel. Run `i` of a sweep uses [`run_seed`]`(base, i)`;
//! variants sharing an index share initialization and batch order.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::RngCore;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Modality, SplitName};
use crate::error::{Error, Result};
use crate::losses::{Ablations, LambdaMode, LossName, Metric};
use crate::metrics::{EvalContext, LambdaSummary, MetricsReport, Task, TaskResults};
use crate::models::{distill_single_modal, pretrain_teacher, TeacherConfig, TeacherModel};
use crate::train::{last_epoch_loss, stream_rng, train_run, RunState, TeacherCache, TrainConfig};

/// Seed of run `index` in a sweep rooted at `base`.
pub fn run_seed(base: u64, index: usize) -> u64 {
    stream_rng(base, 7, index as u64).next_u64()
}

/// Corpus, frozen teachers and cached evaluation relevance shared by a set
/// of runs.
pub struct Workbench {
    pub corpus: Corpus,
    pub image_teacher: TeacherModel,
    pub text_teacher: TeacherModel,
    pub cache: TeacherCache,
    pub eval: EvalContext,
}

impl Workbench {
    pub fn new(corpus: Corpus, image_teacher: TeacherModel, text_teacher: TeacherModel) -> Result<Self> {
        let cache = TeacherCache::compute(&corpus, &image_teacher, &text_teacher)?;
        let eval = EvalContext::new(&corpus, SplitName::Test)?;
        Ok(Self {
            corpus,
            image_teacher,
            text_teacher,
            cache,
            eval,
        })
    }

    /// Pretrains both teachers on `corpus` with `config`.
    pub fn pretrained(corpus: Corpus, config: &TeacherConfig) -> Result<Self> {
        let (image, text) = rayon::join(
            || pretrain_teacher(&corpus, Modality::Image, config),
            || pretrain_teacher(&corpus, Modality::Text, config),
        );
        Self::new(corpus, image?, text?)
    }

    /// Single-modal scores of the standalone teachers: I2I for the image
    /// teacher and T2T for the text teacher.
    pub fn teacher_results(&self) -> Result<TaskResults> {
        let mut r = self.eval.evaluate_model(&self.image_teacher, &self.corpus, &[Modality::Image])?;
        let t = self.eval.evaluate_model(&self.text_teacher, &self.corpus, &[Modality::Text])?;
        r.values.extend(t.values);
        r.zero_relevance.extend(t.zero_relevance);
        Ok(r)
    }

    pub fn run(&self, label: &str, config: &TrainConfig) -> Result<RunOutcome> {
        let state = train_run(&self.corpus, &self.cache, config)?;
        let results = self.eval.evaluate_model(&state.model, &self.corpus, &[Modality::Image, Modality::Text])?;
        Ok(RunOutcome::new(label, config, &state, results))
    }

    pub fn report(&self, outcome: &RunOutcome) -> Result<MetricsReport> {
        MetricsReport::new(
            outcome.results.clone(),
            &outcome.config_hash,
            outcome.seed,
            "test",
            outcome.lambda,
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunOutcome {
    pub label: String,
    pub seed: u64,
    pub config_hash: String,
    pub results: TaskResults,
    pub lambda: Option<LambdaSummary>,
    pub final_lambda: f64,
    /// Mean total objective over the last epoch.
    pub final_loss: f64,
}

impl RunOutcome {
    fn new(label: &str, config: &TrainConfig, state: &RunState, results: TaskResults) -> Self {
        Self {
            label: label.into(),
            seed: config.seed,
            config_hash: config.hash(),
            results,
            lambda: LambdaSummary::from_trajectory(&state.lambda_trajectory),
            final_lambda: state.lambda(),
            final_loss: last_epoch_loss(&state.loss_history).unwrap_or(f64::NAN),
        }
    }

    /// A task metric, or `"lambda"` / `"final_loss"`.
    pub fn value(&self, key: &str) -> Option<f64> {
        match key {
            "lambda" => Some(self.final_lambda),
            "final_loss" => Some(self.final_loss),
            _ => {
                let (task, metric) = key.split_once(' ')?;
                self.results.get(task.parse().ok()?, metric)
            }
        }
    }
}

/// Columns reported by every comparison table.
pub const TABLE_COLUMNS: [&str; 12] = [
    "I2T R@1",
    "I2T R@5",
    "I2T R@10",
    "T2I R@1",
    "T2I R@5",
    "T2I R@10",
    "I2I NDCG@10",
    "T2T NDCG@10",
    "I2IT NDCG@10",
    "T2IT NDCG@10",
    "lambda",
    "final_loss",
];

/// One variant evaluated over several seeds.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TableRow {
    pub label: String,
    pub seeds: Vec<u64>,
    /// Column → one value per seed.
    pub values: BTreeMap<String, Vec<f64>>,
}

impl TableRow {
    fn from_runs(label: &str, runs: &[RunOutcome]) -> Self {
        let mut values = BTreeMap::new();
        for col in TABLE_COLUMNS {
            let v: Vec<f64> = runs.iter().filter_map(|r| r.value(col)).collect();
            if v.len() == runs.len() {
                values.insert(col.to_string(), v);
            }
        }
        Self {
            label: label.into(),
            seeds: runs.iter().map(|r| r.seed).collect(),
            values,
        }
    }

    pub fn mean(&self, column: &str) -> Option<f64> {
        let v = self.values.get(column)?;
        Some(v.iter().sum::<f64>() / v.len() as f64)
    }

    /// Sample standard deviation; 0 for a single seed.
    pub fn std(&self, column: &str) -> Option<f64> {
        let v = self.values.get(column)?;
        let m = self.mean(column)?;
        if v.len() < 2 {
            return Some(0.0);
        }
        Some((v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub title: String,
    pub rows: Vec<TableRow>,
}

impl ComparisonTable {
    pub fn row(&self, label: &str) -> Option<&TableRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    fn columns(&self) -> Vec<&str> {
        TABLE_COLUMNS
            .into_iter()
            .filter(|c| self.rows.iter().any(|r| r.values.contains_key(*c)))
            .collect()
    }

    /// Long format: `variant,column,seed,value`, one line per seed, then
    /// `mean` and `std` lines.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("variant,column,seed,value\n");
        for row in &self.rows {
            for col in self.columns() {
                let Some(vals) = row.values.get(col) else { continue };
                for (seed, v) in row.seeds.iter().zip(vals) {
                    let _ = writeln!(s, "{},{col},{seed},{v:.6}", row.label);
                }
                let _ = writeln!(s, "{},{col},mean,{:.6}", row.label, row.mean(col).unwrap_or(f64::NAN));
                let _ = writeln!(s, "{},{col},std,{:.6}", row.label, row.std(col).unwrap_or(f64::NAN));
            }
        }
        s
    }

    /// `mean ± std` per cell.
    pub fn to_markdown(&self) -> String {
        let cols = self.columns();
        let mut s = format!("### {}\n\n| variant |", self.title);
        for c in &cols {
            let _ = write!(s, " {c} |");
        }
        s.push_str("\n|---|");
        s.push_str(&"---:|".repeat(cols.len()));
        s.push('\n');
        for row in &self.rows {
            let _ = write!(s, "| {} |", row.label);
            for c in &cols {
                match (row.mean(c), row.std(c)) {
                    (Some(m), Some(d)) => {
                        let _ = write!(s, " {m:.4} ± {d:.4} |");
                    }
                    _ => s.push_str(" |"),
                }
            }
            s.push('\n');
        }
        s
    }
}

/// A labelled training configuration without its seed.
#[derive(Clone, Debug)]
pub struct Variant {
    pub label: String,
    pub config: TrainConfig,
}

impl Variant {
    pub fn new(label: impl Into<String>, config: TrainConfig) -> Self {
        Self {
            label: label.into(),
            config,
        }
    }
}

/// Trains every variant on `n_seeds` seeds derived from `base.seed`.
pub fn run_matrix(bench: &Workbench, title: &str, variants: &[Variant], base_seed: u64, n_seeds: usize) -> Result<(ComparisonTable, Vec<RunOutcome>)> {
    if n_seeds == 0 || variants.is_empty() {
        return Err(Error::Config("a comparison needs at least one variant and one seed".into()));
    }
    let jobs: Vec<(usize, usize)> = (0..variants.len()).flat_map(|v| (0..n_seeds).map(move |s| (v, s))).collect();
    let runs: Vec<RunOutcome> = jobs
        .par_iter()
        .map(|&(v, s)| {
            let mut cfg = variants[v].config.clone();
            cfg.seed = run_seed(base_seed, s);
            bench.run(&variants[v].label, &cfg)
        })
        .collect::<Result<_>>()?;
    let rows = variants
        .iter()
        .enumerate()
        .map(|(v, var)| TableRow::from_runs(&var.label, &runs[v * n_seeds..(v + 1) * n_seeds]))
        .collect();
    Ok((
        ComparisonTable {
            title: title.into(),
            rows,
        },
        runs,
    ))
}

/// Full objective, the cross-modal-only baseline and each single-term
/// removal.
pub fn ablation_variants(base: &TrainConfig) -> Vec<Variant> {
    let mut v = vec![
        Variant::new("full", base.clone()),
        Variant::new(
            "cr only",
            TrainConfig {
                ablations: Ablations::cr_only(),
                ..base.clone()
            },
        ),
    ];
    for name in LossName::ALL {
        v.push(Variant::new(
            format!("w/o {name}"),
            TrainConfig {
                ablations: Ablations::without(name),
                ..base.clone()
            },
        ));
    }
    v
}

pub fn metric_variants(base: &TrainConfig) -> Vec<Variant> {
    Metric::ALL
        .into_iter()
        .map(|m| {
            Variant::new(
                m.name().to_uppercase(),
                TrainConfig {
                    metric: m,
                    ..base.clone()
                },
            )
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepAxis {
    Batch,
    Tau,
    Lambda,
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "batch" | "j" => Ok(SweepAxis::Batch),
            "tau" => Ok(SweepAxis::Tau),
            "lambda" => Ok(SweepAxis::Lambda),
            _ => Err(Error::Config(format!("unknown sweep axis {s:?} (batch, tau or lambda)"))),
        }
    }
}

impl SweepAxis {
    pub fn default_values(self) -> Vec<String> {
        let v: &[&str] = match self {
            SweepAxis::Batch => &["12", "24", "36", "48"],
            SweepAxis::Tau => &["0.05", "0.1", "0.2", "0.5"],
            SweepAxis::Lambda => &["0", "0.2", "0.4", "0.6", "0.8", "1.0", "learnable"],
        };
        v.iter().map(|s| s.to_string()).collect()
    }
}

/// One variant per value; λ values are fixed weights or `learnable`.
pub fn sweep_variants(base: &TrainConfig, axis: SweepAxis, values: &[String]) -> Result<Vec<Variant>> {
    let num = |v: &str| -> Result<f64> {
        v.parse::<f64>()
            .map_err(|_| Error::Config(format!("sweep value {v:?} is not a number")))
    };
    values
        .iter()
        .map(|v| {
            let mut c = base.clone();
            let label = match axis {
                SweepAxis::Batch => {
                    c.batch_size = v
                        .parse()
                        .map_err(|_| Error::Config(format!("batch size {v:?} is not an integer")))?;
                    format!("J={v}")
                }
                SweepAxis::Tau => {
                    c.tau = num(v)?;
                    format!("tau={v}")
                }
                SweepAxis::Lambda if v.eq_ignore_ascii_case("learnable") => {
                    c.lambda_mode = LambdaMode::Learnable;
                    "lambda=learnable".into()
                }
                SweepAxis::Lambda => {
                    c.lambda_mode = LambdaMode::Fixed(num(v)?);
                    format!("lambda={v}")
                }
            };
            c.validate()?;
            Ok(Variant::new(label, c))
        })
        .collect()
}

/// Standalone teachers against cross-modal distillation between them:
/// an image encoder taught by the text teacher (strong to weak) and a text
/// encoder taught by the image teacher (weak to strong).
pub fn imbalance_probe(bench: &Workbench, config: &TeacherConfig, base_seed: u64, n_seeds: usize) -> Result<ComparisonTable> {
    if n_seeds == 0 {
        return Err(Error::Config("the probe needs at least one seed".into()));
    }
    let teachers = bench.teacher_results()?;
    let i2i = |r: &TaskResults| r.get(Task::I2I, "NDCG@10");
    let t2t = |r: &TaskResults| r.get(Task::T2T, "NDCG@10");

    let probes: Vec<(TaskResults, TaskResults, u64)> = (0..n_seeds)
        .into_par_iter()
        .map(|s| {
            let seed = run_seed(base_seed, s);
            let cfg = TeacherConfig { seed, ..*config };
            let s2w = distill_single_modal(&bench.corpus, Modality::Image, &bench.cache.text, &cfg)?;
            let w2s = distill_single_modal(&bench.corpus, Modality::Text, &bench.cache.image, &cfg)?;
            Ok((
                bench.eval.evaluate_model(&s2w, &bench.corpus, &[Modality::Image])?,
                bench.eval.evaluate_model(&w2s, &bench.corpus, &[Modality::Text])?,
                seed,
            ))
        })
        .collect::<Result<_>>()?;
    let seeds: Vec<u64> = probes.iter().map(|p| p.2).collect();
    let row = |label: &str, image: Vec<Option<f64>>, text: Vec<Option<f64>>| {
        let mut values = BTreeMap::new();
        for (col, v) in [("I2I NDCG@10", image), ("T2T NDCG@10", text)] {
            let v: Vec<f64> = v.into_iter().flatten().collect();
            if !v.is_empty() {
                values.insert(col.to_string(), v);
            }
        }
        TableRow {
            label: label.into(),
            seeds: seeds.clone(),
            values,
        }
    };
    let rep = |x: Option<f64>| vec![x; n_seeds];
    Ok(ComparisonTable {
        title: "Strong/weak single-modal distillation".into(),
        rows: vec![
            row("image teacher", rep(i2i(&teachers)), vec![]),
            row("text teacher", vec![], rep(t2t(&teachers))),
            row("S2W@Image", probes.iter().map(|p| i2i(&p.0)).collect(), vec![]),
            row("W2S@Text", vec![], probes.iter().map(|p| t2t(&p.1)).collect()),
        ],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate, GeneratorConfig};

    fn bench() -> Workbench {
        let corpus = generate(&GeneratorConfig::imbalanced(150, 1)).unwrap();
        Workbench::new(corpus, TeacherModel::oracle(Modality::Image), TeacherModel::oracle(Modality::Text)).unwrap()
    }

    fn tiny() -> TrainConfig {
        TrainConfig {
            batch_size: 8,
            epochs: 1,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn matrix_is_deterministic_and_reports_spread() {
        let b = bench();
        let variants = &ablation_variants(&tiny())[..2];
        let (t1, _) = run_matrix(&b, "ablation", variants, 5, 2).unwrap();
        let (t2, _) = run_matrix(&b, "ablation", variants, 5, 2).unwrap();
        assert_eq!(t1.to_csv(), t2.to_csv());
        let full = t1.row("full").unwrap();
        assert_eq!(full.seeds.len(), 2);
        assert_eq!(full.seeds, t1.row("cr only").unwrap().seeds);
        assert!(full.std("T2T NDCG@10").unwrap() >= 0.0);
        assert!(t1.to_markdown().contains("| full |"));
        assert!(t1.to_csv().contains("full,T2T NDCG@10,mean,"));
    }

    #[test]
    fn sweep_parsing() {
        let base = tiny();
        let v = sweep_variants(&base, SweepAxis::Lambda, &SweepAxis::Lambda.default_values()).unwrap();
        assert_eq!(v.len(), 7);
        assert_eq!(v[1].config.lambda_mode, LambdaMode::Fixed(0.2));
        assert_eq!(v[6].config.lambda_mode, LambdaMode::Learnable);
        assert!(sweep_variants(&base, SweepAxis::Tau, &["x".into()]).is_err());
        assert!(sweep_variants(&base, SweepAxis::Batch, &["1".into()]).is_err());
        assert_eq!("tau".parse::<SweepAxis>().unwrap(), SweepAxis::Tau);
    }

    #[test]
    fn run_seeds_are_distinct() {
        let s: Vec<u64> = (0..5).map(|i| run_seed(3, i)).collect();
        let mut d = s.clone();
        d.dedup();
        assert_eq!(s, d);
        assert_eq!(run_seed(3, 1), run_seed(3, 1));
    }
}
