//! Training objectives.
//!
//! Cross-modal matching is `cr = itc + itm`; multi-granularity distillation
//! is `md = iic + ttc + sa`; the trained objective is `total = cr + md`.

mod contrastive;
mod structure;

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use contrastive::{
    cross_entropy, info_nce, itc_loss, itc_probabilities, itm_loss, repr_distill_loss, sample_hard_negative,
    sample_itm_negatives, softmax_rows, symmetric_info_nce, ItcOutput, MATCH, NO_MATCH,
};
pub use structure::{
    fuse_teachers, fuse_teachers_var, relational_matrix, sa_loss, sa_loss_value, Metric, Role, SimilarityMatrix, Source,
};

use crate::autodiff::{Tape, Tensor, Var};
use crate::corpus::{Corpus, Modality};
use crate::error::{Error, Result};
use crate::models::{stack_feats, StudentVars};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossName {
    Itc,
    Itm,
    Iic,
    Ttc,
    Sa,
}

impl LossName {
    pub const ALL: [LossName; 5] = [LossName::Itc, LossName::Itm, LossName::Iic, LossName::Ttc, LossName::Sa];

    pub fn name(self) -> &'static str {
        match self {
            LossName::Itc => "itc",
            LossName::Itm => "itm",
            LossName::Iic => "iic",
            LossName::Ttc => "ttc",
            LossName::Sa => "sa",
        }
    }
}

impl fmt::Display for LossName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().trim_start_matches("l_").trim_start_matches("loss_");
        LossName::ALL
            .into_iter()
            .find(|l| l.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown loss {s:?} (expected itc, itm, iic, ttc or sa)")))
    }
}

/// Components removed from the objective. A removed component is reported
/// as exactly 0 and contributes no gradient.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablations {
    pub itc: bool,
    pub itm: bool,
    pub iic: bool,
    pub ttc: bool,
    pub sa: bool,
}

impl Ablations {
    pub fn none() -> Self {
        Self::default()
    }

    /// Only the cross-modal matching terms remain.
    pub fn cr_only() -> Self {
        Self {
            iic: true,
            ttc: true,
            sa: true,
            ..Self::default()
        }
    }

    pub fn without(name: LossName) -> Self {
        let mut a = Self::default();
        a.set(name, true);
        a
    }

    pub fn disabled(&self, name: LossName) -> bool {
        match name {
            LossName::Itc => self.itc,
            LossName::Itm => self.itm,
            LossName::Iic => self.iic,
            LossName::Ttc => self.ttc,
            LossName::Sa => self.sa,
        }
    }

    pub fn set(&mut self, name: LossName, off: bool) {
        match name {
            LossName::Itc => self.itc = off,
            LossName::Itm => self.itm = off,
            LossName::Iic => self.iic = off,
            LossName::Ttc => self.ttc = off,
            LossName::Sa => self.sa = off,
        }
    }

    /// Parses a comma-separated list such as `"iic,ttc,sa"`.
    pub fn parse_list(list: &str) -> Result<Self> {
        let mut a = Self::default();
        for part in list.split(',').filter(|p| !p.trim().is_empty()) {
            a.set(part.parse()?, true);
        }
        Ok(a)
    }

    pub fn label(&self) -> String {
        let off: Vec<&str> = LossName::ALL
            .into_iter()
            .filter(|l| self.disabled(*l))
            .map(LossName::name)
            .collect();
        if off.is_empty() {
            "full".into()
        } else {
            format!("w/o {}", off.join("+"))
        }
    }
}

/// How the teacher-fusion weight is obtained.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LambdaMode {
    /// `λ = sigmoid(lambda_logit)`, trained with the student.
    Learnable,
    /// Constant `λ` in [0, 1]; the logit receives no gradient.
    Fixed(f64),
}

impl Default for LambdaMode {
    fn default() -> Self {
        LambdaMode::Learnable
    }
}

/// Which student embeddings form `S_IT`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StructureSource {
    /// `IT_CLS` of each matched pair from the cross-attention encoder.
    #[default]
    FusedCls,
    /// Mean of the image and text projection relations.
    Projections,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub tau: f64,
    /// Temperature of the distillation InfoNCE terms; defaults to `tau`.
    pub distill_tau: Option<f64>,
    pub metric: Metric,
    pub ablations: Ablations,
    pub lambda_mode: LambdaMode,
    pub structure_source: StructureSource,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau: 0.1,
            distill_tau: None,
            metric: Metric::Mae,
            ablations: Ablations::none(),
            lambda_mode: LambdaMode::Learnable,
            structure_source: StructureSource::FusedCls,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let taus = [Some(self.tau), self.distill_tau];
        if taus.iter().flatten().any(|t| !(*t > 0.0 && t.is_finite())) {
            return Err(Error::Config("temperatures must be positive".into()));
        }
        if let LambdaMode::Fixed(l) = self.lambda_mode {
            if !(0.0..=1.0).contains(&l) {
                return Err(Error::Config(format!("fixed lambda {l} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// A batch of `J` aligned pairs with their frozen teacher embeddings.
#[derive(Clone, Debug)]
pub struct Batch {
    pub ids: Vec<usize>,
    /// `J·L_I × d_feat`.
    pub image_feats: Tensor,
    /// `J·L_T × d_feat`.
    pub text_feats: Tensor,
    /// `J × d_proj`, unit rows.
    pub teacher_image: Tensor,
    pub teacher_text: Tensor,
}

impl Batch {
    /// `teacher_image`/`teacher_text` hold one row per corpus instance.
    pub fn assemble(corpus: &Corpus, ids: &[usize], teacher_image: &Tensor, teacher_text: &Tensor) -> Result<Self> {
        if ids.len() < 2 {
            return Err(Error::Contract("a batch needs at least two pairs".into()));
        }
        Ok(Self {
            ids: ids.to_vec(),
            image_feats: stack_feats(corpus, ids, Modality::Image)?,
            text_feats: stack_feats(corpus, ids, Modality::Text)?,
            teacher_image: teacher_image.select_rows(ids),
            teacher_text: teacher_text.select_rows(ids),
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Plain-value record of one objective evaluation.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LossBundle {
    pub itc: f64,
    pub itm: f64,
    pub iic: f64,
    pub ttc: f64,
    pub sa: f64,
    pub cr: f64,
    pub md: f64,
    pub total: f64,
    #[serde(skip)]
    pub p_i2t: Tensor,
    #[serde(skip)]
    pub p_t2i: Tensor,
    pub lambda_value: f64,
}

impl LossBundle {
    pub fn component(&self, name: LossName) -> f64 {
        match name {
            LossName::Itc => self.itc,
            LossName::Itm => self.itm,
            LossName::Iic => self.iic,
            LossName::Ttc => self.ttc,
            LossName::Sa => self.sa,
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.itc, self.itm, self.iic, self.ttc, self.sa, self.cr, self.md, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Tape handles of a composed objective.
pub struct LossGraph {
    pub total: Var,
    pub lambda: Var,
    pub bundle: LossBundle,
}

/// Builds every enabled component on `tape` and composes them.
///
/// `rng` drives hard-negative sampling only and is consumed only when the
/// matching term is enabled.
pub fn total_loss<R: Rng + ?Sized>(
    tape: &mut Tape,
    student: &StudentVars,
    batch: &Batch,
    config: &LossConfig,
    rng: &mut R,
) -> Result<LossGraph> {
    config.validate()?;
    let n = batch.len();
    let abl = config.ablations;
    let distill_tau = config.distill_tau.unwrap_or(config.tau);
    let fw = student.forward_batch(tape, &batch.image_feats, &batch.text_feats, n)?;

    let (p_i2t, p_t2i) = itc_probabilities(tape.value(fw.i_proj), tape.value(fw.t_proj), config.tau)?;
    let zero = tape.constant(Tensor::zeros(&[1, 1]));

    let itc = if abl.itc {
        zero
    } else {
        itc_loss(tape, fw.i_proj, fw.t_proj, config.tau)?.loss
    };

    let need_fused = !abl.sa && config.structure_source == StructureSource::FusedCls;
    let (itm, positives) = if abl.itm {
        let fused = if need_fused {
            let ids: Vec<usize> = (0..n).collect();
            Some(student.fuse_pairs(tape, &fw, &ids, &ids)?.it_cls)
        } else {
            None
        };
        (zero, fused)
    } else {
        let negatives = sample_itm_negatives(&p_t2i, rng)?;
        let (l, pos) = itm_loss(tape, student, &fw, &negatives)?;
        (l, Some(pos))
    };

    let iic = if abl.iic {
        zero
    } else {
        let t = tape.constant(batch.teacher_image.clone());
        repr_distill_loss(tape, fw.i_proj, t, distill_tau)?
    };
    let ttc = if abl.ttc {
        zero
    } else {
        let t = tape.constant(batch.teacher_text.clone());
        repr_distill_loss(tape, fw.t_proj, t, distill_tau)?
    };

    let lambda = match config.lambda_mode {
        LambdaMode::Learnable => student.lambda(tape),
        LambdaMode::Fixed(l) => tape.constant(Tensor::scalar(l)?),
    };
    let sa = if abl.sa {
        zero
    } else {
        let s_i = relational_matrix(&batch.teacher_image, Role::SI, Source::Teacher)?;
        let s_t = relational_matrix(&batch.teacher_text, Role::ST, Source::Teacher)?;
        let s_i = tape.constant(s_i.values);
        let s_t = tape.constant(s_t.values);
        let s_o = fuse_teachers_var(tape, s_i, s_t, lambda)?;
        let s_it = match config.structure_source {
            StructureSource::FusedCls => {
                let it = positives.expect("fused CLS built when sa is enabled");
                tape.cosine_matrix(it, it)?
            }
            StructureSource::Projections => {
                let si = tape.cosine_matrix(fw.i_proj, fw.i_proj)?;
                let st = tape.cosine_matrix(fw.t_proj, fw.t_proj)?;
                let s = tape.add(si, st)?;
                tape.scale(s, 0.5)
            }
        };
        sa_loss(tape, s_o, s_it, config.metric)?
    };

    let cr = tape.add(itc, itm)?;
    let md0 = tape.add(iic, ttc)?;
    let md = tape.add(md0, sa)?;
    let total = tape.add(cr, md)?;
    let v = |tape: &Tape, x: Var| tape.scalar_value(x);
    let bundle = LossBundle {
        itc: v(tape, itc),
        itm: v(tape, itm),
        iic: v(tape, iic),
        ttc: v(tape, ttc),
        sa: v(tape, sa),
        cr: v(tape, cr),
        md: v(tape, md),
        total: v(tape, total),
        p_i2t,
        p_t2i,
        lambda_value: v(tape, lambda),
    };
    Ok(LossGraph { total, lambda, bundle })
}
