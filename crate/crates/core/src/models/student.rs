use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::layers::{cls_pool, gather_blocks, CrossAttention, CrossAttentionOutput, CrossAttentionVars, Linear, LinearVars, Mlp, MlpVars};
use super::Embedder;
use crate::autodiff::{sigmoid, Tape, Tensor, Var};
use crate::corpus::{Corpus, Modality};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub d_feat: usize,
    pub d: usize,
    pub d_proj: usize,
    pub heads: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        Self {
            d_feat: 32,
            d: 64,
            d_proj: 32,
            heads: 4,
        }
    }
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        if self.d_feat == 0 || self.d == 0 || self.d_proj == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if self.heads == 0 || self.d % self.heads != 0 {
            return Err(Error::Config(format!(
                "d = {} not divisible by {} heads",
                self.d, self.heads
            )));
        }
        Ok(())
    }
}

/// Cross-modal student: per-modality token encoders with CLS pooling, a
/// text-oriented cross-attention layer, projection heads `g_i`/`g_t`, the
/// matching classifier and the teacher-fusion logit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudentModel {
    pub dims: ModelDims,
    pub image_encoder: Mlp,
    pub text_encoder: Mlp,
    pub cls_image: Tensor,
    pub cls_text: Tensor,
    pub cross: CrossAttention,
    pub g_i: Linear,
    pub g_t: Linear,
    pub itm_head: Linear,
    /// `λ = sigmoid(lambda_logit)`.
    pub lambda_logit: Tensor,
}

pub const PARAM_NAMES: [&str; 21] = [
    "image_encoder.hidden.w",
    "image_encoder.hidden.b",
    "image_encoder.out.w",
    "image_encoder.out.b",
    "text_encoder.hidden.w",
    "text_encoder.hidden.b",
    "text_encoder.out.w",
    "text_encoder.out.b",
    "cls_image",
    "cls_text",
    "cross.w_q",
    "cross.w_k",
    "cross.w_v",
    "cross.w_o",
    "g_i.w",
    "g_i.b",
    "g_t.w",
    "g_t.b",
    "itm_head.w",
    "itm_head.b",
    "lambda_logit",
];

/// Position of the λ logit in [`StudentModel::params`].
pub const LAMBDA_INDEX: usize = 20;

impl StudentModel {
    pub fn init(dims: ModelDims, seed: u64) -> Result<Self> {
        dims.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = dims.d;
        Ok(Self {
            dims,
            image_encoder: Mlp::init(dims.d_feat, d, d, &mut rng),
            text_encoder: Mlp::init(dims.d_feat, d, d, &mut rng),
            cls_image: Tensor::randn(&[1, d], 0.02, &mut rng),
            cls_text: Tensor::randn(&[1, d], 0.02, &mut rng),
            cross: CrossAttention::init(d, dims.heads, &mut rng)?,
            g_i: Linear::init(d, dims.d_proj, &mut rng),
            g_t: Linear::init(d, dims.d_proj, &mut rng),
            itm_head: Linear::init(d, 2, &mut rng),
            lambda_logit: Tensor::zeros(&[1, 1]),
        })
    }

    /// All-zero weights and CLS vectors.
    pub fn zeros(dims: ModelDims) -> Result<Self> {
        let mut m = Self::init(dims, 0)?;
        for p in m.params_mut() {
            p.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        Ok(m)
    }

    pub fn lambda(&self) -> f64 {
        sigmoid(self.lambda_logit.item())
    }

    /// Parameters in a fixed order shared by [`StudentVars::all`],
    /// checkpoints and the optimizer.
    pub fn params(&self) -> Vec<&Tensor> {
        let mut v: Vec<&Tensor> = Vec::with_capacity(21);
        v.extend(self.image_encoder.params());
        v.extend(self.text_encoder.params());
        v.push(&self.cls_image);
        v.push(&self.cls_text);
        v.extend(self.cross.params());
        v.extend(self.g_i.params());
        v.extend(self.g_t.params());
        v.extend(self.itm_head.params());
        v.push(&self.lambda_logit);
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v: Vec<&mut Tensor> = Vec::with_capacity(21);
        v.extend(self.image_encoder.params_mut());
        v.extend(self.text_encoder.params_mut());
        v.push(&mut self.cls_image);
        v.push(&mut self.cls_text);
        v.extend(self.cross.params_mut());
        v.extend(self.g_i.params_mut());
        v.extend(self.g_t.params_mut());
        v.extend(self.itm_head.params_mut());
        v.push(&mut self.lambda_logit);
        v
    }

    pub fn param_names(&self) -> &'static [&'static str] {
        &PARAM_NAMES
    }

    pub fn num_parameters(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    pub fn bind(&self, tape: &mut Tape) -> StudentVars {
        StudentVars {
            dims: self.dims,
            image_encoder: self.image_encoder.bind(tape),
            text_encoder: self.text_encoder.bind(tape),
            cls_image: tape.param(self.cls_image.clone()),
            cls_text: tape.param(self.cls_text.clone()),
            cross: self.cross.bind(tape),
            g_i: self.g_i.bind(tape),
            g_t: self.g_t.bind(tape),
            itm_head: self.itm_head.bind(tape),
            lambda_logit: tape.param(self.lambda_logit.clone()),
        }
    }

    /// Encoded tokens and CLS embedding of one image.
    pub fn encode_image(&self, image_feats: &Tensor) -> Result<(Tensor, Tensor)> {
        self.encode_one(image_feats, Modality::Image)
    }

    pub fn encode_text(&self, text_feats: &Tensor) -> Result<(Tensor, Tensor)> {
        self.encode_one(text_feats, Modality::Text)
    }

    fn encode_one(&self, feats: &Tensor, modality: Modality) -> Result<(Tensor, Tensor)> {
        if feats.rows() == 0 || feats.is_empty() {
            return Err(Error::Contract("cannot encode an empty token sequence".into()));
        }
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let x = tape.constant(feats.clone());
        let (tokens, cls) = vars.encode(&mut tape, x, 1, modality)?;
        let cls = tape.value(cls).reshape(vec![self.dims.d])?;
        Ok((tape.value(tokens).clone(), cls))
    }

    /// Fused text stream and `IT_CLS` for one pair. `text_tokens` are the
    /// encoded text tokens (the text CLS is prepended here).
    pub fn cross_attend(&self, text_tokens: &Tensor, text_cls: &Tensor, image_tokens: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::new();
        let layer = self.cross.bind(&mut tape);
        let cls = tape.constant(text_cls.reshape(vec![1, self.dims.d])?);
        let toks = tape.constant(text_tokens.clone());
        let seq = tape.concat_rows(&[cls, toks])?;
        let img = tape.constant(image_tokens.clone());
        let out = layer.forward(&mut tape, seq, img, 1)?;
        let it = tape.value(out.it_cls).reshape(vec![self.dims.d])?;
        Ok((tape.value(out.fused).clone(), it))
    }
}

/// Tape handles for every student parameter.
#[derive(Clone, Copy, Debug)]
pub struct StudentVars {
    pub dims: ModelDims,
    pub image_encoder: MlpVars,
    pub text_encoder: MlpVars,
    pub cls_image: Var,
    pub cls_text: Var,
    pub cross: CrossAttentionVars,
    pub g_i: LinearVars,
    pub g_t: LinearVars,
    pub itm_head: LinearVars,
    pub lambda_logit: Var,
}

/// Single-modal forward results for a batch of `n` aligned pairs.
#[derive(Clone, Copy, Debug)]
pub struct BatchForward {
    pub n: usize,
    pub image_len: usize,
    pub text_len: usize,
    pub image_tokens: Var,
    /// `n·(L_T+1) × d`: each text block is `[T_CLS; tokens]`.
    pub text_seq: Var,
    pub i_cls: Var,
    pub t_cls: Var,
    pub i_proj: Var,
    pub t_proj: Var,
}

impl StudentVars {
    /// Same order as [`StudentModel::params`].
    pub fn all(&self) -> Vec<Var> {
        let mut v = Vec::with_capacity(21);
        v.extend(self.image_encoder.vars());
        v.extend(self.text_encoder.vars());
        v.push(self.cls_image);
        v.push(self.cls_text);
        v.extend(self.cross.vars());
        v.extend(self.g_i.vars());
        v.extend(self.g_t.vars());
        v.extend(self.itm_head.vars());
        v.push(self.lambda_logit);
        v
    }

    /// Inverse of [`StudentVars::all`]: rebinds 21 handles in parameter
    /// order, e.g. inputs created by a finite-difference harness.
    pub fn from_vars(dims: ModelDims, v: &[Var]) -> Result<Self> {
        if v.len() != PARAM_NAMES.len() {
            return Err(Error::Contract(format!("expected {} parameter handles, got {}", PARAM_NAMES.len(), v.len())));
        }
        let lin = |i: usize| LinearVars { w: v[i], b: v[i + 1] };
        Ok(Self {
            dims,
            image_encoder: MlpVars { hidden: lin(0), out: lin(2) },
            text_encoder: MlpVars { hidden: lin(4), out: lin(6) },
            cls_image: v[8],
            cls_text: v[9],
            cross: CrossAttentionVars {
                heads: dims.heads,
                w_q: v[10],
                w_k: v[11],
                w_v: v[12],
                w_o: v[13],
            },
            g_i: lin(14),
            g_t: lin(16),
            itm_head: lin(18),
            lambda_logit: v[LAMBDA_INDEX],
        })
    }

    /// `feats`: `n` stacked blocks of token features.
    pub fn encode(&self, tape: &mut Tape, feats: Var, n: usize, modality: Modality) -> Result<(Var, Var)> {
        let (enc, cls) = match modality {
            Modality::Image => (&self.image_encoder, self.cls_image),
            Modality::Text => (&self.text_encoder, self.cls_text),
        };
        if tape.dims(feats).0 == 0 {
            return Err(Error::Contract("cannot encode an empty token sequence".into()));
        }
        let tokens = enc.forward(tape, feats)?;
        let pooled = cls_pool(tape, tokens, cls, n)?;
        Ok((tokens, pooled))
    }

    pub fn forward_batch(&self, tape: &mut Tape, image_feats: &Tensor, text_feats: &Tensor, n: usize) -> Result<BatchForward> {
        let img = tape.constant(image_feats.clone());
        let txt = tape.constant(text_feats.clone());
        let (image_tokens, i_cls) = self.encode(tape, img, n, Modality::Image)?;
        let (text_tokens, t_cls) = self.encode(tape, txt, n, Modality::Text)?;
        let text_len = tape.dims(text_tokens).0 / n;
        let image_len = tape.dims(image_tokens).0 / n;

        // [T_CLS rows; token rows] reindexed into per-instance blocks
        let stacked = tape.concat_rows(&[t_cls, text_tokens])?;
        let idx: Vec<usize> = (0..n)
            .flat_map(|b| std::iter::once(b).chain((0..text_len).map(move |l| n + b * text_len + l)))
            .collect();
        let text_seq = tape.gather_rows(stacked, &idx)?;

        let i_proj = self.g_i.forward(tape, i_cls)?;
        let t_proj = self.g_t.forward(tape, t_cls)?;
        Ok(BatchForward {
            n,
            image_len,
            text_len,
            image_tokens,
            text_seq,
            i_cls,
            t_cls,
            i_proj,
            t_proj,
        })
    }

    /// Cross attention over the pairs `(image_ids[p], text_ids[p])`, indices
    /// into the batch.
    pub fn fuse_pairs(&self, tape: &mut Tape, fw: &BatchForward, image_ids: &[usize], text_ids: &[usize]) -> Result<CrossAttentionOutput> {
        if image_ids.len() != text_ids.len() || image_ids.is_empty() {
            return Err(Error::Contract("pair lists must be non-empty and equal length".into()));
        }
        let text = gather_blocks(tape, fw.text_seq, fw.text_len + 1, text_ids)?;
        let image = gather_blocks(tape, fw.image_tokens, fw.image_len, image_ids)?;
        self.cross.forward(tape, text, image, image_ids.len())
    }

    pub fn lambda(&self, tape: &mut Tape) -> Var {
        tape.sigmoid(self.lambda_logit)
    }
}

/// Stacks the token features of `ids` into one `Σ L × d_feat` matrix.
pub fn stack_feats(corpus: &Corpus, ids: &[usize], modality: Modality) -> Result<Tensor> {
    let parts: Vec<&Tensor> = ids.iter().map(|&i| corpus.instance(i).feats(modality)).collect();
    Tensor::stack_rows(&parts)
}

const EMBED_CHUNK: usize = 128;

impl Embedder for StudentModel {
    fn embed(&self, corpus: &Corpus, ids: &[usize], modality: Modality) -> Result<Tensor> {
        let chunks: Vec<Tensor> = ids
            .par_chunks(EMBED_CHUNK)
            .map(|chunk| {
                let mut tape = Tape::new();
                let vars = self.bind(&mut tape);
                let feats = tape.constant(stack_feats(corpus, chunk, modality)?);
                let (_, cls) = vars.encode(&mut tape, feats, chunk.len(), modality)?;
                let head = match modality {
                    Modality::Image => vars.g_i,
                    Modality::Text => vars.g_t,
                };
                let proj = head.forward(&mut tape, cls)?;
                tape.value(proj).normalize_rows()
            })
            .collect::<Result<_>>()?;
        Tensor::stack_rows(&chunks.iter().collect::<Vec<_>>())
    }
}
