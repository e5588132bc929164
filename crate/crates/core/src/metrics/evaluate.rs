use std::collections::BTreeMap;

use crate::autodiff::Tensor;
use crate::corpus::{Corpus, Modality, SplitName};
use crate::error::{Error, Result};
use crate::models::Embedder;

use super::ranking::{ndcg_summary, recall_at_k, IndexEntry, RelevanceMatrix, RetrievalIndex, Task};

pub const RECALL_KS: [usize; 3] = [1, 5, 10];
pub const NDCG_KS: [usize; 3] = [10, 20, 50];

/// Unit embeddings of the evaluated ids, row `r` belonging to `ids[r]`.
#[derive(Clone, Debug, Default)]
pub struct EmbeddingSet {
    pub image: Option<Tensor>,
    pub text: Option<Tensor>,
}

impl EmbeddingSet {
    fn get(&self, m: Modality) -> Option<&Tensor> {
        match m {
            Modality::Image => self.image.as_ref(),
            Modality::Text => self.text.as_ref(),
        }
    }

    fn supports(&self, task: Task) -> bool {
        self.get(task.query_modality()).is_some()
            && task.database_modalities().iter().all(|m| self.get(*m).is_some())
    }
}

/// Relevance for every ranking task over one split. Relevance depends only on
/// captions, so it is computed once and reused across models.
pub struct EvalContext {
    pub ids: Vec<usize>,
    captions: Vec<Vec<String>>,
    relevance: BTreeMap<&'static str, RelevanceMatrix>,
}

fn entry(id: usize, modality: Modality, embedding: Vec<f64>, caption: &[String]) -> IndexEntry {
    IndexEntry {
        id,
        modality,
        embedding,
        captions: vec![caption.to_vec()],
    }
}

impl EvalContext {
    pub fn new(corpus: &Corpus, split: SplitName) -> Result<Self> {
        let ids = corpus.split_ids(split).to_vec();
        if ids.len() < 2 {
            return Err(Error::Contract(format!("{split:?} split has fewer than two instances")));
        }
        let captions: Vec<Vec<String>> = ids.iter().map(|&i| corpus.instance(i).caption.clone()).collect();
        let mut ctx = Self {
            ids,
            captions,
            relevance: BTreeMap::new(),
        };
        let placeholder = Tensor::filled(&[ctx.ids.len(), 1], 1.0);
        let both = EmbeddingSet {
            image: Some(placeholder.clone()),
            text: Some(placeholder),
        };
        for task in Task::ALL.into_iter().filter(|t| !t.is_cross_modal()) {
            let (queries, index) = ctx.build(task, &both)?;
            ctx.relevance.insert(task.name(), RelevanceMatrix::compute(&queries, &index)?);
        }
        Ok(ctx)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    fn entries(&self, m: Modality, emb: &Tensor) -> Vec<IndexEntry> {
        self.ids
            .iter()
            .enumerate()
            .map(|(r, &id)| entry(id, m, emb.row(r).to_vec(), &self.captions[r]))
            .collect()
    }

    /// Queries are every split item of the query modality; the database is
    /// every split item of the database modalities, images first.
    fn build(&self, task: Task, set: &EmbeddingSet) -> Result<(Vec<IndexEntry>, RetrievalIndex)> {
        let get = |m: Modality| {
            set.get(m)
                .ok_or_else(|| Error::Contract(format!("{} needs {m:?} embeddings", task.name())))
        };
        for m in [Modality::Image, Modality::Text] {
            if let Some(t) = set.get(m) {
                if t.rows() != self.ids.len() {
                    return Err(Error::Shape {
                        op: "evaluate",
                        detail: format!("{m:?} embeddings have {} rows for {} ids", t.rows(), self.ids.len()),
                    });
                }
            }
        }
        let queries = self.entries(task.query_modality(), get(task.query_modality())?);
        let mut db = Vec::new();
        for m in task.database_modalities() {
            db.extend(self.entries(*m, get(*m)?));
        }
        Ok((queries, RetrievalIndex::new(task, db)?))
    }

    /// Metrics for every task the available embeddings support.
    pub fn evaluate(&self, set: &EmbeddingSet) -> Result<TaskResults> {
        let mut out = TaskResults::default();
        for task in Task::ALL.into_iter().filter(|t| set.supports(*t)) {
            let (queries, index) = self.build(task, set)?;
            let metrics = out.values.entry(task.name().to_string()).or_default();
            if task.is_cross_modal() {
                for k in RECALL_KS {
                    metrics.insert(format!("R@{k}"), recall_at_k(&index, &queries, k.min(index.len()))?);
                }
            } else {
                let rel = &self.relevance[task.name()];
                let mut zero = 0;
                for k in NDCG_KS {
                    let s = ndcg_summary(&index, &queries, rel, k)?;
                    metrics.insert(format!("NDCG@{k}"), s.mean);
                    zero = s.zero_relevance_queries;
                }
                out.zero_relevance.insert(task.name().to_string(), zero);
            }
        }
        Ok(out)
    }

    /// Embeds the split with `model` and evaluates all supported tasks.
    pub fn evaluate_model<E: Embedder + ?Sized>(&self, model: &E, corpus: &Corpus, modalities: &[Modality]) -> Result<TaskResults> {
        let mut set = EmbeddingSet::default();
        for &m in modalities {
            let e = model.embed(corpus, &self.ids, m)?;
            match m {
                Modality::Image => set.image = Some(e),
                Modality::Text => set.text = Some(e),
            }
        }
        self.evaluate(&set)
    }
}

/// Task name → metric name → value, in a stable order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TaskResults {
    pub values: BTreeMap<String, BTreeMap<String, f64>>,
    /// Queries whose relevance to every candidate is zero, per NDCG task.
    pub zero_relevance: BTreeMap<String, usize>,
}

impl TaskResults {
    pub fn get(&self, task: Task, metric: &str) -> Option<f64> {
        self.values.get(task.name())?.get(metric).copied()
    }
}

/// Cross-modal, single-modal and mixed retrieval on `split`.
pub fn evaluate_all<E: Embedder + ?Sized>(model: &E, corpus: &Corpus, split: SplitName) -> Result<TaskResults> {
    let ctx = EvalContext::new(corpus, split)?;
    ctx.evaluate_model(model, corpus, &[Modality::Image, Modality::Text])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate, GeneratorConfig};
    use crate::models::TeacherModel;

    struct Oracle;

    impl Embedder for Oracle {
        fn embed(&self, corpus: &Corpus, ids: &[usize], modality: Modality) -> Result<Tensor> {
            TeacherModel::oracle(modality).embed(corpus, ids, modality)
        }
    }

    #[test]
    fn oracle_reports_every_task_in_range() {
        let corpus = generate(&GeneratorConfig::imbalanced(200, 1)).unwrap();
        let r = evaluate_all(&Oracle, &corpus, SplitName::Test).unwrap();
        assert_eq!(r.values.len(), 6);
        for (task, metrics) in &r.values {
            assert_eq!(metrics.len(), 3, "{task}");
            assert!(metrics.values().all(|v| (0.0..=1.0).contains(v)));
        }
        assert!(r.get(Task::T2T, "NDCG@10").unwrap() > 0.5);
        let again = evaluate_all(&Oracle, &corpus, SplitName::Test).unwrap();
        assert_eq!(r, again);
    }

    #[test]
    fn single_modality_runs_only_its_tasks() {
        let corpus = generate(&GeneratorConfig::imbalanced(100, 1)).unwrap();
        let ctx = EvalContext::new(&corpus, SplitName::Test).unwrap();
        let t = TeacherModel::oracle(Modality::Text);
        let r = ctx.evaluate_model(&t, &corpus, &[Modality::Text]).unwrap();
        assert_eq!(r.values.keys().collect::<Vec<_>>(), vec!["T2T"]);
    }
}
