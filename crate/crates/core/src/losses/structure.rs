use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, Tape, Tensor, Var};
use crate::error::{shape_err, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Role {
    /// Image-teacher relations.
    SI,
    /// Text-teacher relations.
    ST,
    /// Student fused relations.
    SIT,
    /// Fused teacher target.
    SO,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Student,
    Teacher,
    Fused,
}

/// Pairwise cosine matrix over a batch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityMatrix {
    pub role: Role,
    pub source: Source,
    pub values: Tensor,
}

/// Unit diagonal is set exactly; off-diagonal entries are clamped to [-1, 1].
pub fn relational_matrix(embeddings: &Tensor, role: Role, source: Source) -> Result<SimilarityMatrix> {
    let u = embeddings.normalize_rows()?;
    let mut values = u.matmul(&u.transpose())?;
    let j = values.rows();
    for (k, v) in values.data_mut().iter_mut().enumerate() {
        *v = if k / j == k % j { 1.0 } else { v.clamp(-1.0, 1.0) };
    }
    Ok(SimilarityMatrix { role, source, values })
}

/// `S_O = λ S_I + (1-λ) S_T` with `λ = sigmoid(lambda_logit)`.
pub fn fuse_teachers(s_i: &SimilarityMatrix, s_t: &SimilarityMatrix, lambda_logit: f64) -> Result<SimilarityMatrix> {
    if s_i.values.shape() != s_t.values.shape() {
        return shape_err(
            "fuse_teachers",
            format!("{:?} vs {:?}", s_i.values.shape(), s_t.values.shape()),
        );
    }
    let lambda = sigmoid(lambda_logit);
    let data = s_i
        .values
        .data()
        .iter()
        .zip(s_t.values.data())
        .map(|(a, b)| lambda * a + (1.0 - lambda) * b)
        .collect();
    Ok(SimilarityMatrix {
        role: Role::SO,
        source: Source::Fused,
        values: Tensor::new(s_i.values.shape().to_vec(), data)?,
    })
}

/// Tape form of [`fuse_teachers`]: `S_T + λ (S_I - S_T)` with `lambda` 1×1.
pub fn fuse_teachers_var(tape: &mut Tape, s_i: Var, s_t: Var, lambda: Var) -> Result<Var> {
    let diff = tape.sub(s_i, s_t)?;
    let weighted = tape.mul_scalar(diff, lambda)?;
    tape.add(s_t, weighted)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    #[default]
    Mae,
    Mse,
    Kl,
    Wd,
}

impl Metric {
    pub const ALL: [Metric; 4] = [Metric::Mae, Metric::Mse, Metric::Kl, Metric::Wd];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Mae => "mae",
            Metric::Mse => "mse",
            Metric::Kl => "kl",
            Metric::Wd => "wd",
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Metric::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown metric {s:?} (expected mae, mse, kl or wd)")))
    }
}

/// Structure distillation between the teacher target `s_o` and the student
/// matrix `s_it`, both `J×J`. Diagonals are excluded and the sum over rows is
/// divided by `J`.
///
/// KL and WD compare per-row distributions obtained by a softmax over each
/// row's off-diagonal entries; KL is `KL(teacher || student)` and WD is the
/// 1-D earth mover distance along the index line.
pub fn sa_loss(tape: &mut Tape, s_o: Var, s_it: Var, metric: Metric) -> Result<Var> {
    let (j, c) = tape.dims(s_o);
    if tape.dims(s_it) != (j, c) || j != c {
        return shape_err("sa_loss", format!("{:?} vs {:?}", (j, c), tape.dims(s_it)));
    }
    if j < 2 {
        return Err(Error::Contract("structure distillation needs J >= 2".into()));
    }
    let o = tape.off_diagonal(s_o)?;
    let s = tape.off_diagonal(s_it)?;
    let per_row_total = match metric {
        Metric::Mae => {
            let d = tape.sub(o, s)?;
            let a = tape.abs(d);
            tape.sum(a)
        }
        Metric::Mse => {
            let d = tape.sub(o, s)?;
            let a = tape.square(d);
            tape.sum(a)
        }
        Metric::Kl => {
            let p = tape.row_softmax(o);
            let logp = tape.log_softmax(o);
            let logq = tape.log_softmax(s);
            let d = tape.sub(logp, logq)?;
            let w = tape.mul(p, d)?;
            tape.sum(w)
        }
        Metric::Wd => {
            let p = tape.row_softmax(o);
            let q = tape.row_softmax(s);
            let cp = tape.cumsum_rows(p);
            let cq = tape.cumsum_rows(q);
            let d = tape.sub(cp, cq)?;
            let a = tape.abs(d);
            tape.sum(a)
        }
    };
    Ok(tape.scale(per_row_total, 1.0 / j as f64))
}

/// Plain-value convenience wrapper around [`sa_loss`].
pub fn sa_loss_value(s_o: &SimilarityMatrix, s_it: &SimilarityMatrix, metric: Metric) -> Result<f64> {
    let mut tape = Tape::new();
    let o = tape.constant(s_o.values.clone());
    let s = tape.constant(s_it.values.clone());
    let l = sa_loss(&mut tape, o, s, metric)?;
    Ok(tape.scalar_value(l))
}
