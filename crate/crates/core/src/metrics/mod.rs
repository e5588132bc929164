//! Retrieval evaluation: ROUGE-L relevance, Recall@K for cross-modal tasks
//! and NDCG@K for single-modal and mixed tasks.

mod evaluate;
mod ranking;
mod report;
mod rouge;

pub use evaluate::{evaluate_all, EmbeddingSet, EvalContext, TaskResults, NDCG_KS, RECALL_KS};
pub use ranking::{
    ndcg_at_k, ndcg_of_ranking, ndcg_summary, recall_at_k, relevance, IndexEntry, NdcgSummary, RelevanceMatrix,
    RetrievalIndex, Task,
};
pub use report::{LambdaSummary, MetricsReport};
pub use rouge::{lcs_len, rouge_l, rouge_l_beta, tokenize, ROUGE_BETA};
