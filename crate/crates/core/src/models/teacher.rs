use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::layers::{mean_pool, Linear, LinearVars, Mlp, MlpVars};
use super::student::stack_feats;
use super::Embedder;
use crate::autodiff::{Tape, Tensor, Var};
use crate::corpus::{Corpus, Modality, SplitName};
use crate::error::{Error, Result};
use crate::losses::{cross_entropy, info_nce, symmetric_info_nce};
use crate::train::{AdamW, Moments};

/// Single-modal encoder: per-token MLP, mean pooling, linear projection,
/// unit normalization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeacherEncoder {
    pub encoder: Mlp,
    pub proj: Linear,
}

impl TeacherEncoder {
    pub fn init<R: Rng + ?Sized>(d_feat: usize, d_hidden: usize, d_proj: usize, rng: &mut R) -> Self {
        Self {
            encoder: Mlp::init(d_feat, d_hidden, d_hidden, rng),
            proj: Linear::init(d_hidden, d_proj, rng),
        }
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut v: Vec<&Tensor> = self.encoder.params().into();
        v.extend(self.proj.params());
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v: Vec<&mut Tensor> = self.encoder.params_mut().into();
        v.extend(self.proj.params_mut());
        v
    }

    fn bind(&self, tape: &mut Tape) -> TeacherVars {
        TeacherVars {
            encoder: self.encoder.bind(tape),
            proj: self.proj.bind(tape),
        }
    }

    /// Unit embeddings of `n` stacked token blocks.
    pub fn embed_feats(&self, feats: &Tensor, n: usize) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let x = tape.constant(feats.clone());
        let z = vars.forward(&mut tape, x, n)?;
        Ok(tape.value(z).clone())
    }
}

#[derive(Clone, Copy)]
struct TeacherVars {
    encoder: MlpVars,
    proj: LinearVars,
}

impl TeacherVars {
    fn all(&self) -> Vec<Var> {
        let mut v: Vec<Var> = self.encoder.vars().into();
        v.extend(self.proj.vars());
        v
    }

    fn forward(&self, tape: &mut Tape, feats: Var, n: usize) -> Result<Var> {
        let tokens = self.encoder.forward(tape, feats)?;
        let pooled = mean_pool(tape, tokens, n)?;
        let z = self.proj.forward(tape, pooled)?;
        tape.normalize_rows(z)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum TeacherKind {
    /// Delegates to the corpus oracle map of the latent vector.
    Oracle,
    Trained {
        net: TeacherEncoder,
        /// `k × d_proj`, unit rows.
        prototypes: Tensor,
    },
}

/// Frozen single-modal teacher.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeacherModel {
    pub modality: Modality,
    pub kind: TeacherKind,
}

impl TeacherModel {
    pub fn oracle(modality: Modality) -> Self {
        Self {
            modality,
            kind: TeacherKind::Oracle,
        }
    }

    pub fn is_oracle(&self) -> bool {
        matches!(self.kind, TeacherKind::Oracle)
    }

    /// SHA-256 over the modality tag and every parameter value.
    pub fn param_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(format!("{:?}", self.modality).as_bytes());
        match &self.kind {
            TeacherKind::Oracle => h.update(b"oracle"),
            TeacherKind::Trained { net, prototypes } => {
                for p in net.params().into_iter().chain(std::iter::once(prototypes)) {
                    for d in p.shape() {
                        h.update((*d as u64).to_le_bytes());
                    }
                    for v in p.data() {
                        h.update(v.to_le_bytes());
                    }
                }
            }
        }
        hex::encode(h.finalize())
    }

    /// Unit embedding of one instance.
    pub fn teacher_embed(&self, corpus: &Corpus, id: usize) -> Result<Tensor> {
        let e = self.embed(corpus, &[id], self.modality)?;
        e.reshape(vec![e.cols()])
    }
}

const EMBED_CHUNK: usize = 256;

impl Embedder for TeacherModel {
    fn embed(&self, corpus: &Corpus, ids: &[usize], modality: Modality) -> Result<Tensor> {
        if modality != self.modality {
            return Err(Error::Contract(format!(
                "{:?} teacher cannot embed {:?} inputs",
                self.modality, modality
            )));
        }
        match &self.kind {
            TeacherKind::Oracle => {
                let rows = ids
                    .iter()
                    .map(|&i| corpus.oracle_embedding(corpus.instance(i), modality))
                    .collect::<Result<Vec<_>>>()?;
                let rows: Vec<Tensor> = rows
                    .into_iter()
                    .map(|r| {
                        let n = r.len();
                        r.reshape(vec![1, n])
                    })
                    .collect::<Result<_>>()?;
                Tensor::stack_rows(&rows.iter().collect::<Vec<_>>())
            }
            TeacherKind::Trained { net, .. } => {
                let chunks: Vec<Tensor> = ids
                    .par_chunks(EMBED_CHUNK)
                    .map(|c| net.embed_feats(&stack_feats(corpus, c, modality)?, c.len()))
                    .collect::<Result<_>>()?;
                Tensor::stack_rows(&chunks.iter().collect::<Vec<_>>())
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TeacherConfig {
    pub k_prototypes: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub tau: f64,
    pub proto_tau: f64,
    pub proto_weight: f64,
    pub kmeans_iters: usize,
    pub d_hidden: usize,
    pub d_proj: usize,
    pub seed: u64,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            k_prototypes: 16,
            epochs: 10,
            batch_size: 64,
            lr: 3e-3,
            tau: 0.1,
            proto_tau: 0.1,
            proto_weight: 0.25,
            kmeans_iters: 10,
            d_hidden: 64,
            d_proj: 32,
            seed: 0,
        }
    }
}

impl TeacherConfig {
    fn validate(&self, n_train: usize) -> Result<()> {
        if n_train == 0 {
            return Err(Error::Contract("teacher pretraining needs a non-empty train split".into()));
        }
        if self.k_prototypes < 2 {
            return Err(Error::Config("k_prototypes must be at least 2".into()));
        }
        if self.k_prototypes > n_train {
            return Err(Error::Config(format!(
                "{} prototypes for {n_train} training instances",
                self.k_prototypes
            )));
        }
        if self.batch_size < 2 || !(self.lr > 0.0) || !(self.tau > 0.0) || !(self.proto_tau > 0.0) {
            return Err(Error::Config("invalid teacher optimisation settings".into()));
        }
        Ok(())
    }
}

/// Spherical k-means with k-means++ seeding. `x` rows must be unit length.
/// Returns unit prototypes and the assignment of each row.
pub fn spherical_kmeans<R: Rng + ?Sized>(x: &Tensor, k: usize, iters: usize, rng: &mut R) -> Result<(Tensor, Vec<usize>)> {
    let (n, d) = x.dims2();
    if k == 0 || k > n {
        return Err(Error::Config(format!("{k} clusters for {n} points")));
    }
    let dist = |a: &[f64], b: &[f64]| 1.0 - a.iter().zip(b).map(|(p, q)| p * q).sum::<f64>();

    let mut centers: Vec<Vec<f64>> = vec![x.row(rng.random_range(0..n)).to_vec()];
    let mut nearest: Vec<f64> = (0..n).map(|i| dist(x.row(i), &centers[0]).max(0.0)).collect();
    while centers.len() < k {
        let total: f64 = nearest.iter().sum();
        let pick = if total <= 0.0 {
            rng.random_range(0..n)
        } else {
            let mut r = rng.random::<f64>() * total;
            let mut idx = n - 1;
            for (i, w) in nearest.iter().enumerate() {
                if r < *w {
                    idx = i;
                    break;
                }
                r -= w;
            }
            idx
        };
        let c = x.row(pick).to_vec();
        for (i, w) in nearest.iter_mut().enumerate() {
            *w = w.min(dist(x.row(i), &c).max(0.0));
        }
        centers.push(c);
    }

    let mut assign = vec![0usize; n];
    for _ in 0..iters.max(1) {
        for (i, a) in assign.iter_mut().enumerate() {
            let row = x.row(i);
            *a = (0..k)
                .min_by(|&p, &q| dist(row, &centers[p]).total_cmp(&dist(row, &centers[q])))
                .unwrap_or(0);
        }
        let mut sums = vec![vec![0.0; d]; k];
        let mut counts = vec![0usize; k];
        for (i, &a) in assign.iter().enumerate() {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(x.row(i)) {
                *s += v;
            }
        }
        for c in 0..k {
            let norm = sums[c].iter().map(|v| v * v).sum::<f64>().sqrt();
            if counts[c] == 0 || norm < 1e-12 {
                // reseed from the point worst served by its center
                let far = (0..n)
                    .max_by(|&p, &q| {
                        dist(x.row(p), &centers[assign[p]]).total_cmp(&dist(x.row(q), &centers[assign[q]]))
                    })
                    .unwrap_or(0);
                centers[c] = x.row(far).to_vec();
            } else {
                centers[c] = sums[c].iter().map(|v| v / norm).collect();
            }
        }
    }
    let protos = Tensor::matrix(k, d, centers.concat())?;
    Ok((protos, assign))
}

/// Unsupervised prototype-aware contrastive pretraining of a frozen teacher.
///
/// Each epoch re-clusters the clean train embeddings, then for every batch
/// minimizes symmetric InfoNCE between two augmented views plus a
/// prototype cross-entropy that pulls each view toward its assigned
/// prototype and away from the others.
pub fn pretrain_teacher(corpus: &Corpus, modality: Modality, config: &TeacherConfig) -> Result<TeacherModel> {
    let train = corpus.split_ids(SplitName::Train);
    config.validate(train.len())?;
    let mut init_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut net = TeacherEncoder::init(corpus.config.d_feat, config.d_hidden, config.d_proj, &mut init_rng);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1 + modality as u64);

    let clean = stack_feats(corpus, train, modality)?;
    let (mut prototypes, _) = spherical_kmeans(&net.embed_feats(&clean, train.len())?, config.k_prototypes, config.kmeans_iters, &mut rng)?;
    if config.epochs == 0 {
        return Ok(TeacherModel {
            modality,
            kind: TeacherKind::Trained { net, prototypes },
        });
    }

    let opt = AdamW {
        weight_decay: 0.0,
        ..AdamW::default()
    };
    let mut moments = Moments::zeros_like(net.params());
    let decay = vec![false; moments.m.len()];
    let bs = config.batch_size.min(train.len());
    let mut order: Vec<usize> = (0..train.len()).collect();

    for _ in 0..config.epochs {
        let emb = net.embed_feats(&clean, train.len())?;
        let (p, assign) = spherical_kmeans(&emb, config.k_prototypes, config.kmeans_iters, &mut rng)?;
        prototypes = p;
        order.shuffle(&mut rng);
        for chunk in order.chunks_exact(bs) {
            let ids: Vec<usize> = chunk.iter().map(|&i| train[i]).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| assign[i]).collect();
            let views: Vec<Tensor> = (0..2)
                .map(|_| {
                    let parts: Vec<Tensor> = ids
                        .iter()
                        .map(|&i| corpus.augment(corpus.instance(i), modality, &mut rng))
                        .collect();
                    Tensor::stack_rows(&parts.iter().collect::<Vec<_>>())
                })
                .collect::<Result<_>>()?;

            let mut tape = Tape::new();
            let vars = net.bind(&mut tape);
            let protos = tape.constant(prototypes.clone());
            let mut zs = Vec::with_capacity(2);
            for v in &views {
                let x = tape.constant(v.clone());
                zs.push(vars.forward(&mut tape, x, ids.len())?);
            }
            let mut loss = symmetric_info_nce(&mut tape, zs[0], zs[1], config.tau)?;
            for &z in &zs {
                let logits = tape.matmul_nt(z, protos)?;
                let logits = tape.scale(logits, 1.0 / config.proto_tau);
                let ce = cross_entropy(&mut tape, logits, &labels)?;
                let ce = tape.scale(ce, 0.5 * config.proto_weight);
                loss = tape.add(loss, ce)?;
            }
            let grads = tape.backward(loss)?;
            let g: Vec<Tensor> = vars.all().into_iter().map(|v| grads.get(v)).collect();
            opt.step(net.params_mut(), &g, &mut moments, config.lr, &decay)?;
        }
    }
    Ok(TeacherModel {
        modality,
        kind: TeacherKind::Trained { net, prototypes },
    })
}

/// Trains a single-modal encoder of `modality` whose outputs are pulled
/// toward `targets` (one unit row per corpus instance, typically the other
/// modality's teacher) by in-batch InfoNCE.
pub fn distill_single_modal(corpus: &Corpus, modality: Modality, targets: &Tensor, config: &TeacherConfig) -> Result<TeacherModel> {
    let train = corpus.split_ids(SplitName::Train);
    config.validate(train.len())?;
    if targets.rows() != corpus.instances.len() || targets.cols() != config.d_proj {
        return Err(Error::Shape {
            op: "distill_single_modal",
            detail: format!("targets {:?}", targets.shape()),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut net = TeacherEncoder::init(corpus.config.d_feat, config.d_hidden, config.d_proj, &mut rng);
    rng.set_stream(3 + modality as u64);
    let opt = AdamW {
        weight_decay: 0.0,
        ..AdamW::default()
    };
    let mut moments = Moments::zeros_like(net.params());
    let decay = vec![false; moments.m.len()];
    let bs = config.batch_size.min(train.len());
    let mut order: Vec<usize> = train.to_vec();
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for ids in order.chunks_exact(bs) {
            let mut tape = Tape::new();
            let vars = net.bind(&mut tape);
            let x = tape.constant(stack_feats(corpus, ids, modality)?);
            let z = vars.forward(&mut tape, x, ids.len())?;
            let t = tape.constant(targets.select_rows(ids));
            let loss = info_nce(&mut tape, z, t, config.tau)?;
            let grads = tape.backward(loss)?;
            let g: Vec<Tensor> = vars.all().into_iter().map(|v| grads.get(v)).collect();
            opt.step(net.params_mut(), &g, &mut moments, config.lr, &decay)?;
        }
    }
    let emb = net.embed_feats(&stack_feats(corpus, train, modality)?, train.len())?;
    let (prototypes, _) = spherical_kmeans(&emb, config.k_prototypes, config.kmeans_iters, &mut rng)?;
    Ok(TeacherModel {
        modality,
        kind: TeacherKind::Trained { net, prototypes },
    })
}
