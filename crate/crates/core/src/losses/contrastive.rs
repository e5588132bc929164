use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;

use crate::autodiff::{softmax_in_place, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::models::{BatchForward, StudentVars};

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("temperature must be positive, got {tau}")))
    }
}

/// Mean cross-entropy of each row of `logits` against class `labels[row]`.
pub fn cross_entropy(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let logp = tape.log_softmax(logits);
    let picked = tape.take_per_row(logp, labels)?;
    let m = tape.mean(picked);
    Ok(tape.scale(m, -1.0))
}

fn diagonal_labels(n: usize) -> Vec<usize> {
    (0..n).collect()
}

/// In-batch InfoNCE: row `i` of `queries` is positive to row `i` of `keys`,
/// scored by cosine over `tau`.
pub fn info_nce(tape: &mut Tape, queries: Var, keys: Var, tau: f64) -> Result<Var> {
    check_tau(tau)?;
    let (n, _) = tape.dims(queries);
    if tape.dims(keys).0 != n {
        return Err(Error::Shape {
            op: "info_nce",
            detail: format!("{n} queries vs {} keys", tape.dims(keys).0),
        });
    }
    let sim = tape.cosine_matrix(queries, keys)?;
    let logits = tape.scale(sim, 1.0 / tau);
    cross_entropy(tape, logits, &diagonal_labels(n))
}

/// Symmetric InfoNCE over both retrieval directions.
pub fn symmetric_info_nce(tape: &mut Tape, a: Var, b: Var, tau: f64) -> Result<Var> {
    let ab = info_nce(tape, a, b, tau)?;
    let ba = info_nce(tape, b, a, tau)?;
    let s = tape.add(ab, ba)?;
    Ok(tape.scale(s, 0.5))
}

pub struct ItcOutput {
    pub loss: Var,
    /// Row `i`: distribution over texts for image `i`.
    pub p_i2t: Tensor,
    /// Row `t`: distribution over images for text `t`.
    pub p_t2i: Tensor,
}

/// Row-wise softmax of a plain matrix.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    let c = out.cols();
    for row in out.data_mut().chunks_mut(c) {
        softmax_in_place(row);
    }
    out
}

pub fn itc_loss(tape: &mut Tape, i_proj: Var, t_proj: Var, tau: f64) -> Result<ItcOutput> {
    check_tau(tau)?;
    let (j, _) = tape.dims(i_proj);
    if j < 2 {
        return Err(Error::Contract("contrastive loss needs J >= 2".into()));
    }
    let loss = symmetric_info_nce(tape, i_proj, t_proj, tau)?;
    let (p_i2t, p_t2i) = itc_probabilities(tape.value(i_proj), tape.value(t_proj), tau)?;
    Ok(ItcOutput { loss, p_i2t, p_t2i })
}

/// `p_i2t` and `p_t2i` from plain projections.
pub fn itc_probabilities(i_proj: &Tensor, t_proj: &Tensor, tau: f64) -> Result<(Tensor, Tensor)> {
    check_tau(tau)?;
    let i = i_proj.normalize_rows()?;
    let t = t_proj.normalize_rows()?;
    let mut logits = i.matmul(&t.transpose())?;
    logits.data_mut().iter_mut().for_each(|v| *v /= tau);
    Ok((softmax_rows(&logits), softmax_rows(&logits.transpose())))
}

/// Draws an index other than `positive` with probability proportional to
/// `probs`. Falls back to uniform when all off-positive mass is zero.
pub fn sample_hard_negative<R: Rng + ?Sized>(probs: &[f64], positive: usize, rng: &mut R) -> Result<usize> {
    if probs.len() < 2 {
        return Err(Error::Contract("no negative exists in a batch of one".into()));
    }
    if positive >= probs.len() {
        return Err(Error::Contract(format!(
            "positive index {positive} outside batch of {}",
            probs.len()
        )));
    }
    let mut w: Vec<f64> = probs.iter().map(|p| p.max(0.0)).collect();
    w[positive] = 0.0;
    if w.iter().sum::<f64>() <= 0.0 || w.iter().any(|v| !v.is_finite()) {
        w = (0..probs.len()).map(|i| if i == positive { 0.0 } else { 1.0 }).collect();
    }
    let dist = WeightedIndex::new(&w).map_err(|e| Error::Degenerate(e.to_string()))?;
    Ok(dist.sample(rng))
}

/// For each image `j`, a negative text drawn from column `j` of `p_t2i`,
/// i.e. texts weighted by how strongly they retrieve image `j`.
pub fn sample_itm_negatives<R: Rng + ?Sized>(p_t2i: &Tensor, rng: &mut R) -> Result<Vec<usize>> {
    let n = p_t2i.rows();
    let pt = p_t2i.transpose();
    (0..n).map(|j| sample_hard_negative(pt.row(j), j, rng)).collect()
}

/// Label of a matched pair in the ITM head output.
pub const MATCH: usize = 1;
pub const NO_MATCH: usize = 0;

/// Two-class matching loss over `J` positive pairs and `J` pairs of image
/// `j` with text `negatives[j]`. Returns the loss and the positive-pair
/// `IT_CLS` rows.
pub fn itm_loss(tape: &mut Tape, student: &StudentVars, fw: &BatchForward, negatives: &[usize]) -> Result<(Var, Var)> {
    let n = fw.n;
    if negatives.len() != n {
        return Err(Error::Contract(format!("{} negatives for {n} pairs", negatives.len())));
    }
    let images: Vec<usize> = (0..n).chain(0..n).collect();
    let texts: Vec<usize> = (0..n).chain(negatives.iter().copied()).collect();
    let fused = student.fuse_pairs(tape, fw, &images, &texts)?;
    let logits = student.itm_head.forward(tape, fused.it_cls)?;
    let labels: Vec<usize> = (0..2 * n).map(|p| if p < n { MATCH } else { NO_MATCH }).collect();
    let loss = cross_entropy(tape, logits, &labels)?;
    let positives = tape.gather_rows(fused.it_cls, &(0..n).collect::<Vec<_>>())?;
    Ok((loss, positives))
}

/// Distills `student_proj` toward fixed `teacher_emb` rows; used for both the
/// image and the text branch.
pub fn repr_distill_loss(tape: &mut Tape, student_proj: Var, teacher_emb: Var, tau: f64) -> Result<Var> {
    info_nce(tape, student_proj, teacher_emb, tau)
}
