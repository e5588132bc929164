//! Student and teacher networks.

mod layers;
mod student;
mod teacher;

pub use layers::{cls_pool, gather_blocks, mean_pool, CrossAttention, CrossAttentionOutput, CrossAttentionVars, Linear, LinearVars, Mlp, MlpVars};
pub use student::{stack_feats, BatchForward, ModelDims, StudentModel, StudentVars, LAMBDA_INDEX, PARAM_NAMES};
pub use teacher::{distill_single_modal, pretrain_teacher, spherical_kmeans, TeacherConfig, TeacherEncoder, TeacherKind, TeacherModel};

use crate::autodiff::Tensor;
use crate::corpus::{Corpus, Modality};
use crate::error::Result;

/// Anything that maps corpus instances of one modality to unit embeddings,
/// one row per id.
pub trait Embedder: Sync {
    fn embed(&self, corpus: &Corpus, ids: &[usize], modality: Modality) -> Result<Tensor>;
}
