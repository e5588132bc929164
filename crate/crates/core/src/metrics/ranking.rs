use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::rouge::rouge_l;
use crate::corpus::Modality;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Task {
    I2T,
    T2I,
    I2I,
    T2T,
    I2IT,
    T2IT,
}

impl Task {
    pub const ALL: [Task; 6] = [Task::I2T, Task::T2I, Task::I2I, Task::T2T, Task::I2IT, Task::T2IT];

    pub fn name(self) -> &'static str {
        match self {
            Task::I2T => "I2T",
            Task::T2I => "T2I",
            Task::I2I => "I2I",
            Task::T2T => "T2T",
            Task::I2IT => "I2IT",
            Task::T2IT => "T2IT",
        }
    }

    pub fn query_modality(self) -> Modality {
        match self {
            Task::I2T | Task::I2I | Task::I2IT => Modality::Image,
            Task::T2I | Task::T2T | Task::T2IT => Modality::Text,
        }
    }

    pub fn database_modalities(self) -> &'static [Modality] {
        match self {
            Task::I2T | Task::T2T => &[Modality::Text],
            Task::T2I | Task::I2I => &[Modality::Image],
            Task::I2IT | Task::T2IT => &[Modality::Image, Modality::Text],
        }
    }

    pub fn is_cross_modal(self) -> bool {
        matches!(self, Task::I2T | Task::T2I)
    }
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Task::ALL
            .into_iter()
            .find(|t| t.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown task {s}")))
    }
}

/// A query or database item. Items with the same `id` and different
/// modality are an aligned pair.
#[derive(Clone, Debug, PartialEq)]
pub struct IndexEntry {
    pub id: usize,
    pub modality: Modality,
    pub embedding: Vec<f64>,
    /// Sentences associated with the item: an image's captions, or the
    /// text itself.
    pub captions: Vec<Vec<String>>,
}

impl IndexEntry {
    fn same_item(&self, other: &IndexEntry) -> bool {
        self.id == other.id && self.modality == other.modality
    }

    fn aligned_with(&self, other: &IndexEntry) -> bool {
        self.id == other.id && self.modality != other.modality
    }
}

#[derive(Clone, Debug)]
pub struct RetrievalIndex {
    pub task: Task,
    pub entries: Vec<IndexEntry>,
}

impl RetrievalIndex {
    pub fn new(task: Task, entries: Vec<IndexEntry>) -> Result<Self> {
        for e in &entries {
            let n = e.embedding.iter().map(|v| v * v).sum::<f64>().sqrt();
            if (n - 1.0).abs() > 1e-9 {
                return Err(Error::Contract(format!(
                    "entry {} embedding norm {n} is not unit",
                    e.id
                )));
            }
            if !task.database_modalities().contains(&e.modality) {
                return Err(Error::Contract(format!(
                    "{:?} entry in a {} database",
                    e.modality,
                    task.name()
                )));
            }
        }
        for m in task.database_modalities() {
            if !entries.iter().any(|e| e.modality == *m) {
                return Err(Error::Contract(format!(
                    "{} database has no {m:?} entries",
                    task.name()
                )));
            }
        }
        Ok(Self { task, entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Candidate positions by descending cosine, the query itself removed.
    /// Equal scores keep index order.
    pub fn rank(&self, query: &IndexEntry) -> Vec<usize> {
        let mut scored: Vec<(usize, f64)> = self
            .entries
            .iter()
            .enumerate()
            .filter(|(_, e)| !e.same_item(query))
            .map(|(i, e)| (i, dot(&query.embedding, &e.embedding)))
            .collect();
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        scored.into_iter().map(|(i, _)| i).collect()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Max ROUGE-L over sentence pairs; exactly aligned pairs score 1.
pub fn relevance(query: &IndexEntry, candidate: &IndexEntry) -> Result<f64> {
    if query.id == candidate.id {
        return Ok(1.0);
    }
    if query.captions.is_empty() || candidate.captions.is_empty() {
        return Err(Error::Contract(
            "relevance needs at least one sentence on each side".into(),
        ));
    }
    let mut best = 0.0f64;
    for q in &query.captions {
        for c in &candidate.captions {
            best = best.max(rouge_l(q, c)?);
        }
    }
    Ok(best)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RelevanceMatrix {
    pub values: Vec<f64>,
    pub n_query: usize,
    pub n_db: usize,
    pub definition: String,
}

impl RelevanceMatrix {
    pub fn compute(queries: &[IndexEntry], index: &RetrievalIndex) -> Result<Self> {
        let rows: Vec<Vec<f64>> = queries
            .par_iter()
            .map(|q| index.entries.iter().map(|c| relevance(q, c)).collect())
            .collect::<Result<_>>()?;
        Ok(Self {
            values: rows.concat(),
            n_query: queries.len(),
            n_db: index.len(),
            definition: "max ROUGE-L (beta 1.2) over caption pairs; aligned = 1".into(),
        })
    }

    pub fn from_rows(rows: Vec<Vec<f64>>, definition: &str) -> Result<Self> {
        let n_db = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != n_db) {
            return Err(Error::Contract("ragged relevance rows".into()));
        }
        if rows.iter().flatten().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Contract("relevance outside [0,1]".into()));
        }
        Ok(Self {
            n_query: rows.len(),
            n_db,
            values: rows.concat(),
            definition: definition.into(),
        })
    }

    pub fn get(&self, q: usize, c: usize) -> f64 {
        self.values[q * self.n_db + c]
    }
}

/// Fraction of queries with an aligned candidate in the top `k`.
pub fn recall_at_k(index: &RetrievalIndex, queries: &[IndexEntry], k: usize) -> Result<f64> {
    if k == 0 || k > index.len() {
        return Err(Error::Config(format!(
            "k = {k} outside 1..={}",
            index.len()
        )));
    }
    if queries.is_empty() {
        return Err(Error::Contract("no queries".into()));
    }
    let hits: Vec<bool> = queries
        .par_iter()
        .map(|q| {
            if !index.entries.iter().any(|e| e.aligned_with(q)) {
                return Err(Error::Contract(format!("query {} has no aligned candidate", q.id)));
            }
            let ranked = index.rank(q);
            Ok(ranked.iter().take(k).any(|&i| index.entries[i].aligned_with(q)))
        })
        .collect::<Result<_>>()?;
    Ok(hits.iter().filter(|h| **h).count() as f64 / queries.len() as f64)
}

/// Mean NDCG@k plus the number of queries whose relevance is all zero.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NdcgSummary {
    pub mean: f64,
    pub zero_relevance_queries: usize,
}

pub fn ndcg_at_k(
    index: &RetrievalIndex,
    queries: &[IndexEntry],
    relevance: &RelevanceMatrix,
    k: usize,
) -> Result<f64> {
    Ok(ndcg_summary(index, queries, relevance, k)?.mean)
}

pub fn ndcg_summary(
    index: &RetrievalIndex,
    queries: &[IndexEntry],
    relevance: &RelevanceMatrix,
    k: usize,
) -> Result<NdcgSummary> {
    if k == 0 {
        return Err(Error::Config("NDCG cutoff must be positive".into()));
    }
    if queries.is_empty() {
        return Err(Error::Contract("no queries".into()));
    }
    if relevance.n_query != queries.len() || relevance.n_db != index.len() {
        return Err(Error::Contract(format!(
            "relevance is {}x{}, expected {}x{}",
            relevance.n_query,
            relevance.n_db,
            queries.len(),
            index.len()
        )));
    }
    let per_query: Vec<(f64, bool)> = queries
        .par_iter()
        .enumerate()
        .map(|(qi, q)| {
            let ranked = index.rank(q);
            let rels: Vec<f64> = ranked.iter().map(|&c| relevance.get(qi, c)).collect();
            ndcg_of_ranking(&rels, k)
        })
        .collect();
    let total: f64 = per_query.iter().map(|(v, _)| v).sum();
    Ok(NdcgSummary {
        mean: total / queries.len() as f64,
        zero_relevance_queries: per_query.iter().filter(|(_, z)| *z).count(),
    })
}

/// NDCG@k for relevances listed in ranked order. Returns `(value, all_zero)`;
/// an all-zero list scores 1.
pub fn ndcg_of_ranking(rels: &[f64], k: usize) -> (f64, bool) {
    let dcg = |xs: &[f64]| -> f64 {
        xs.iter()
            .take(k)
            .enumerate()
            .map(|(r, rel)| rel / ((r + 2) as f64).log2())
            .sum()
    };
    let mut ideal = rels.to_vec();
    ideal.sort_by(|a, b| b.total_cmp(a));
    let idcg = dcg(&ideal);
    if idcg == 0.0 {
        return (1.0, true);
    }
    (dcg(rels) / idcg, false)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit(v: Vec<f64>) -> Vec<f64> {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.into_iter().map(|x| x / n).collect()
    }

    fn entry(id: usize, modality: Modality, emb: Vec<f64>) -> IndexEntry {
        IndexEntry {
            id,
            modality,
            embedding: unit(emb),
            captions: vec![vec![format!("w{id}")]],
        }
    }

    fn random_entries<R: Rng>(n: usize, d: usize, m: Modality, rng: &mut R) -> Vec<IndexEntry> {
        (0..n)
            .map(|i| entry(i, m, (0..d).map(|_| rng.random::<f64>() - 0.5).collect()))
            .collect()
    }

    #[test]
    fn ndcg_hand_case() {
        // ranked rels [0, 3] with ideal [3, 0]
        let (v, zero) = ndcg_of_ranking(&[0.0, 3.0], 2);
        assert!(!zero);
        assert!((v - 1.0 / 3f64.log2()).abs() < 1e-12);
        assert!((v - 0.6309).abs() < 1e-4);
        assert_eq!(ndcg_of_ranking(&[0.9, 0.5, 0.1], 3).0, 1.0);
        assert_eq!(ndcg_of_ranking(&[0.0, 0.0], 2), (1.0, true));
    }

    #[test]
    fn recall_with_full_database_is_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let imgs = random_entries(20, 8, Modality::Image, &mut rng);
        let txts = random_entries(20, 8, Modality::Text, &mut rng);
        let index = RetrievalIndex::new(Task::I2T, txts).unwrap();
        assert_eq!(recall_at_k(&index, &imgs, 20).unwrap(), 1.0);
        assert!(matches!(recall_at_k(&index, &imgs, 21), Err(Error::Config(_))));
    }

    #[test]
    fn exact_match_counts_at_one() {
        let e = |i: usize| {
            let mut v = vec![0.0; 4];
            v[i] = 1.0;
            v
        };
        let imgs: Vec<_> = (0..4).map(|i| entry(i, Modality::Image, e(i))).collect();
        let txts: Vec<_> = (0..4).map(|i| entry(i, Modality::Text, e(i))).collect();
        let index = RetrievalIndex::new(Task::I2T, txts).unwrap();
        assert_eq!(recall_at_k(&index, &imgs, 1).unwrap(), 1.0);
    }

    #[test]
    fn random_embeddings_recall_matches_null_model() {
        let mut total = 0.0;
        for seed in 0..50 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let imgs = random_entries(100, 16, Modality::Image, &mut rng);
            let txts = random_entries(100, 16, Modality::Text, &mut rng);
            let index = RetrievalIndex::new(Task::I2T, txts).unwrap();
            total += recall_at_k(&index, &imgs, 10).unwrap();
        }
        let mean = total / 50.0;
        assert!((mean - 0.10).abs() <= 0.04, "mean R@10 {mean}");
    }

    #[test]
    fn non_unit_embeddings_rejected() {
        let bad = IndexEntry {
            id: 0,
            modality: Modality::Text,
            embedding: vec![2.0, 0.0],
            captions: vec![],
        };
        assert!(RetrievalIndex::new(Task::T2T, vec![bad]).is_err());
    }

    #[test]
    fn mixed_database_needs_both_modalities() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let txts = random_entries(3, 4, Modality::Text, &mut rng);
        assert!(RetrievalIndex::new(Task::T2IT, txts.clone()).is_err());
        assert!(RetrievalIndex::new(Task::T2T, txts).is_ok());
    }

    #[test]
    fn aligned_relevance_forced_to_one() {
        let a = IndexEntry {
            id: 1,
            modality: Modality::Image,
            embedding: vec![1.0],
            captions: vec![vec!["x".into()]],
        };
        let b = IndexEntry {
            id: 1,
            modality: Modality::Text,
            embedding: vec![1.0],
            captions: vec![vec!["y".into()]],
        };
        assert_eq!(relevance(&a, &b).unwrap(), 1.0);
    }

    #[test]
    fn ranking_excludes_query_and_breaks_ties_by_position() {
        let same = vec![1.0, 0.0];
        let entries: Vec<_> = (0..4).map(|i| entry(i, Modality::Text, same.clone())).collect();
        let index = RetrievalIndex::new(Task::T2T, entries.clone()).unwrap();
        assert_eq!(index.rank(&entries[2]), vec![0, 1, 3]);
    }

    // Independent oracle: explicit full sort by (score desc, position asc),
    // direct DCG formula.
    fn brute_force_ndcg(scores: &[f64], rels: &[f64], k: usize) -> f64 {
        let mut order: Vec<usize> = (0..scores.len()).collect();
        for i in 0..order.len() {
            for j in i + 1..order.len() {
                let (a, b) = (order[i], order[j]);
                if scores[b] > scores[a] || (scores[b] == scores[a] && b < a) {
                    order.swap(i, j);
                }
            }
        }
        let mut dcg = 0.0;
        for (r, &c) in order.iter().enumerate().take(k) {
            dcg += rels[c] / (r as f64 + 2.0).log2();
        }
        let mut ideal = rels.to_vec();
        for i in 0..ideal.len() {
            for j in i + 1..ideal.len() {
                if ideal[j] > ideal[i] {
                    ideal.swap(i, j);
                }
            }
        }
        let mut idcg = 0.0;
        for (r, rel) in ideal.iter().enumerate().take(k) {
            idcg += rel / (r as f64 + 2.0).log2();
        }
        if idcg == 0.0 {
            1.0
        } else {
            dcg / idcg
        }
    }

    #[test]
    fn ndcg_matches_brute_force_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for case in 0..100 {
            let n = rng.random_range(2..30);
            let k = rng.random_range(1..=n);
            let q = entry(10_000, Modality::Text, vec![1.0, 0.0, 0.0]);
            let db = random_entries(n, 3, Modality::Text, &mut rng);
            // quantized relevances create ties in the ideal ordering
            let rels: Vec<f64> = (0..n).map(|_| (rng.random_range(0..5) as f64) / 4.0).collect();
            let scores: Vec<f64> = db.iter().map(|e| e.embedding[0]).collect();
            let index = RetrievalIndex::new(Task::T2T, db).unwrap();
            let rm = RelevanceMatrix::from_rows(vec![rels.clone()], "test").unwrap();
            let got = ndcg_at_k(&index, std::slice::from_ref(&q), &rm, k).unwrap();
            let want = brute_force_ndcg(&scores, &rels, k);
            assert_eq!(got, want, "case {case}");
        }
    }

    proptest! {
        #[test]
        fn ndcg_bounded(rels in prop::collection::vec(0.0f64..=1.0, 1..40), k in 1usize..50) {
            let (v, _) = ndcg_of_ranking(&rels, k);
            prop_assert!((0.0..=1.0 + 1e-12).contains(&v));
            let mut sorted = rels.clone();
            sorted.sort_by(|a, b| b.total_cmp(a));
            prop_assert!((ndcg_of_ranking(&sorted, k).0 - 1.0).abs() < 1e-12);
        }

        #[test]
        fn recall_monotone_in_k(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let imgs = random_entries(15, 4, Modality::Image, &mut rng);
            let txts = random_entries(15, 4, Modality::Text, &mut rng);
            let index = RetrievalIndex::new(Task::I2T, txts).unwrap();
            let mut last = 0.0;
            for k in 1..=15 {
                let r = recall_at_k(&index, &imgs, k).unwrap();
                prop_assert!(r >= last);
                last = r;
            }
        }
    }
}
