use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{shape_err, Error, Result};

fn glorot<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor {
    Tensor::randn(&[fan_in, fan_out], (1.0 / fan_in as f64).sqrt(), rng)
}

/// Affine map `x W + b`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub w: Tensor,
    pub b: Tensor,
}

impl Linear {
    pub fn init<R: Rng + ?Sized>(d_in: usize, d_out: usize, rng: &mut R) -> Self {
        Self {
            w: glorot(d_in, d_out, rng),
            b: Tensor::zeros(&[1, d_out]),
        }
    }

    pub fn zeros(d_in: usize, d_out: usize) -> Self {
        Self {
            w: Tensor::zeros(&[d_in, d_out]),
            b: Tensor::zeros(&[1, d_out]),
        }
    }

    pub fn params(&self) -> [&Tensor; 2] {
        [&self.w, &self.b]
    }

    pub fn params_mut(&mut self) -> [&mut Tensor; 2] {
        [&mut self.w, &mut self.b]
    }

    pub fn bind(&self, tape: &mut Tape) -> LinearVars {
        LinearVars {
            w: tape.param(self.w.clone()),
            b: tape.param(self.b.clone()),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LinearVars {
    pub w: Var,
    pub b: Var,
}

impl LinearVars {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let h = tape.matmul(x, self.w)?;
        tape.add_row(h, self.b)
    }

    pub fn vars(&self) -> [Var; 2] {
        [self.w, self.b]
    }
}

/// Two-layer tanh MLP applied to every token row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub hidden: Linear,
    pub out: Linear,
}

impl Mlp {
    pub fn init<R: Rng + ?Sized>(d_in: usize, d_hidden: usize, d_out: usize, rng: &mut R) -> Self {
        Self {
            hidden: Linear::init(d_in, d_hidden, rng),
            out: Linear::init(d_hidden, d_out, rng),
        }
    }

    pub fn zeros(d_in: usize, d_hidden: usize, d_out: usize) -> Self {
        Self {
            hidden: Linear::zeros(d_in, d_hidden),
            out: Linear::zeros(d_hidden, d_out),
        }
    }

    pub fn params(&self) -> [&Tensor; 4] {
        [&self.hidden.w, &self.hidden.b, &self.out.w, &self.out.b]
    }

    pub fn params_mut(&mut self) -> [&mut Tensor; 4] {
        [
            &mut self.hidden.w,
            &mut self.hidden.b,
            &mut self.out.w,
            &mut self.out.b,
        ]
    }

    pub fn bind(&self, tape: &mut Tape) -> MlpVars {
        MlpVars {
            hidden: self.hidden.bind(tape),
            out: self.out.bind(tape),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct MlpVars {
    pub hidden: LinearVars,
    pub out: LinearVars,
}

impl MlpVars {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let h = self.hidden.forward(tape, x)?;
        let h = tape.tanh(h);
        self.out.forward(tape, h)
    }

    pub fn vars(&self) -> [Var; 4] {
        [self.hidden.w, self.hidden.b, self.out.w, self.out.b]
    }
}

/// Text-queries-image multi-head cross attention with an output projection
/// and a residual connection on the text stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossAttention {
    pub heads: usize,
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_o: Tensor,
}

impl CrossAttention {
    pub fn init<R: Rng + ?Sized>(d: usize, heads: usize, rng: &mut R) -> Result<Self> {
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!("d = {d} not divisible by {heads} heads")));
        }
        Ok(Self {
            heads,
            w_q: glorot(d, d, rng),
            w_k: glorot(d, d, rng),
            w_v: glorot(d, d, rng),
            w_o: glorot(d, d, rng),
        })
    }

    pub fn params(&self) -> [&Tensor; 4] {
        [&self.w_q, &self.w_k, &self.w_v, &self.w_o]
    }

    pub fn params_mut(&mut self) -> [&mut Tensor; 4] {
        [&mut self.w_q, &mut self.w_k, &mut self.w_v, &mut self.w_o]
    }

    pub fn bind(&self, tape: &mut Tape) -> CrossAttentionVars {
        CrossAttentionVars {
            heads: self.heads,
            w_q: tape.param(self.w_q.clone()),
            w_k: tape.param(self.w_k.clone()),
            w_v: tape.param(self.w_v.clone()),
            w_o: tape.param(self.w_o.clone()),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct CrossAttentionVars {
    pub heads: usize,
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub w_o: Var,
}

/// Result of attending `pairs` text sequences over their image tokens.
#[derive(Clone, Debug)]
pub struct CrossAttentionOutput {
    /// `pairs·L_q × d`: text stream after attention and residual.
    pub fused: Var,
    /// `pairs × d`: fused row at the text CLS position.
    pub it_cls: Var,
    /// `pairs·L_q × d`: concatenated per-head attention output before `W_o`.
    pub context: Var,
    /// Per head, `pairs·L_q × L_k` attention weights.
    pub weights: Vec<Var>,
}

impl CrossAttentionVars {
    pub fn vars(&self) -> [Var; 4] {
        [self.w_q, self.w_k, self.w_v, self.w_o]
    }

    /// `text`: `pairs` stacked blocks of `L_q × d` whose first row is the CLS
    /// position. `image`: `pairs` stacked blocks of `L_k × d`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        text: Var,
        image: Var,
        pairs: usize,
    ) -> Result<CrossAttentionOutput> {
        let (tr, d) = tape.dims(text);
        let (ir, di) = tape.dims(image);
        if d != di || d != tape.dims(self.w_q).0 {
            return shape_err("cross_attend", format!("text d={d}, image d={di}"));
        }
        if pairs == 0 || tr % pairs != 0 || ir % pairs != 0 {
            return shape_err("cross_attend", format!("{tr}/{ir} rows for {pairs} pairs"));
        }
        let lq = tr / pairs;
        let d_head = d / self.heads;
        let scale = 1.0 / (d_head as f64).sqrt();

        let q = tape.matmul(text, self.w_q)?;
        let k = tape.matmul(image, self.w_k)?;
        let v = tape.matmul(image, self.w_v)?;

        let mut heads = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (a, b) = (h * d_head, (h + 1) * d_head);
            let qh = tape.slice_cols(q, a, b)?;
            let kh = tape.slice_cols(k, a, b)?;
            let vh = tape.slice_cols(v, a, b)?;
            let scores = tape.bmm(qh, kh, pairs, true)?;
            let scores = tape.scale(scores, scale);
            let attn = tape.row_softmax(scores);
            weights.push(attn);
            heads.push(tape.bmm(attn, vh, pairs, false)?);
        }
        let context = tape.concat_cols(&heads)?;
        let projected = tape.matmul(context, self.w_o)?;
        let fused = tape.add(text, projected)?;
        let cls_rows: Vec<usize> = (0..pairs).map(|p| p * lq).collect();
        let it_cls = tape.gather_rows(fused, &cls_rows)?;
        Ok(CrossAttentionOutput {
            fused,
            it_cls,
            context,
            weights,
        })
    }
}

/// Attention pooling with the CLS vector as query:
/// `cls + Σ_l softmax_l(t_l·cls/√d) t_l` for each of `batch` blocks.
pub fn cls_pool(tape: &mut Tape, tokens: Var, cls: Var, batch: usize) -> Result<Var> {
    let (rows, d) = tape.dims(tokens);
    if batch == 0 || rows % batch != 0 || rows == 0 {
        return Err(Error::Contract(format!(
            "pooling {rows} token rows into {batch} sequences"
        )));
    }
    let len = rows / batch;
    let scores = tape.matmul_nt(tokens, cls)?;
    let scores = tape.scale(scores, 1.0 / (d as f64).sqrt());
    let scores = tape.reshape(scores, batch, len)?;
    let w = tape.row_softmax(scores);
    let pooled = tape.bmm(w, tokens, batch, false)?;
    tape.add_row(pooled, cls)
}

/// Uniform mean over each of `batch` blocks of rows.
pub fn mean_pool(tape: &mut Tape, tokens: Var, batch: usize) -> Result<Var> {
    let rows = tape.dims(tokens).0;
    if batch == 0 || rows % batch != 0 || rows == 0 {
        return Err(Error::Contract(format!(
            "pooling {rows} token rows into {batch} sequences"
        )));
    }
    let len = rows / batch;
    let w = tape.constant(Tensor::filled(&[batch, len], 1.0 / len as f64));
    tape.bmm(w, tokens, batch, false)
}

/// Rows of `x` grouped in blocks of `block` rows, reordered by `ids`.
pub fn gather_blocks(tape: &mut Tape, x: Var, block: usize, ids: &[usize]) -> Result<Var> {
    let idx: Vec<usize> = ids
        .iter()
        .flat_map(|&b| (b * block)..((b + 1) * block))
        .collect();
    tape.gather_rows(x, &idx)
}
