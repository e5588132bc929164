use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{shape_err, Result};

/// Adam with decoupled weight decay.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.1,
        }
    }
}

/// First and second moment estimates, one tensor per parameter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    /// Number of updates applied so far.
    pub t: u64,
}

impl Moments {
    pub fn zeros_like<'a>(params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let m: Vec<Tensor> = params.into_iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            v: m.clone(),
            m,
            t: 0,
        }
    }
}

impl AdamW {
    /// One update. `decay[i]` selects which parameters receive weight decay.
    ///
    /// `p ← p − lr·wd·p − lr·m̂/(√v̂ + eps)`
    pub fn step(&self, params: Vec<&mut Tensor>, grads: &[Tensor], moments: &mut Moments, lr: f64, decay: &[bool]) -> Result<()> {
        let n = params.len();
        if grads.len() != n || moments.m.len() != n || moments.v.len() != n || decay.len() != n {
            return shape_err(
                "adamw",
                format!(
                    "{n} params, {} grads, {} moments, {} decay flags",
                    grads.len(),
                    moments.m.len(),
                    decay.len()
                ),
            );
        }
        moments.t += 1;
        let t = moments.t as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (i, p) in params.into_iter().enumerate() {
            let g = &grads[i];
            if g.shape() != p.shape() || moments.m[i].shape() != p.shape() {
                return shape_err("adamw", format!("parameter {i}: {:?} vs {:?}", p.shape(), g.shape()));
            }
            let wd = if decay[i] { self.weight_decay } else { 0.0 };
            let m = moments.m[i].data_mut();
            let v = moments.v[i].data_mut();
            for (k, w) in p.data_mut().iter_mut().enumerate() {
                let gk = g.data()[k];
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * gk;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * gk * gk;
                let mh = m[k] / bc1;
                let vh = v[k] / bc2;
                *w -= lr * wd * *w + lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
