//! Central finite-difference oracle for tape gradients.
//!
//! The oracle only evaluates forward values, so it is independent of the
//! backward rules it checks.

use super::{Tape, Tensor, Var};
use crate::error::Result;

pub const DEFAULT_STEP: f64 = 1e-5;

/// Norm-wise relative error `‖a − b‖ / max(‖a‖, ‖b‖, floor)`.
pub fn relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    let na = analytic.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = numeric.iter().map(|v| v * v).sum::<f64>().sqrt();
    diff / na.max(nb).max(floor)
}

/// Numeric gradient of a scalar function of several tensors.
pub fn numeric_gradient<F>(f: &F, inputs: &[Tensor], step: f64) -> Result<Vec<Tensor>>
where
    F: Fn(&[Tensor]) -> Result<f64>,
{
    let mut work = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for t in 0..inputs.len() {
        let mut g = vec![0.0; inputs[t].len()];
        for (e, slot) in g.iter_mut().enumerate() {
            let orig = inputs[t].data()[e];
            work[t].data_mut()[e] = orig + step;
            let up = f(&work)?;
            work[t].data_mut()[e] = orig - step;
            let down = f(&work)?;
            work[t].data_mut()[e] = orig;
            *slot = (up - down) / (2.0 * step);
        }
        out.push(Tensor::from_parts(inputs[t].shape().to_vec(), g));
    }
    Ok(out)
}

/// Builds `loss = build(tape, params)` twice over: once for backward, and
/// repeatedly for finite differences. Returns the worst per-input relative
/// error.
pub fn check<B>(build: B, inputs: &[Tensor]) -> Result<f64>
where
    B: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = build(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let eval = |ts: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ts.iter().map(|t| tape.param(t.clone())).collect();
        let loss = build(&mut tape, &vars)?;
        Ok(tape.scalar_value(loss))
    };
    let numeric = numeric_gradient(&eval, inputs, DEFAULT_STEP)?;

    Ok(vars
        .iter()
        .zip(&numeric)
        .map(|(v, n)| relative_error(grads.get(*v).data(), n.data(), 1e-8))
        .fold(0.0, f64::max))
}
