//! Student checkpoints.
//!
//! ```text
//! offset  size  field
//! 0       4     magic "RBVC"
//! 4       4     version, u32 LE (currently 1)
//! 8       8     header length H, u64 LE
//! 16      H     JSON header (dims, λ, step, parameter names and shapes,
//!               training config, λ trajectory, loss history)
//! 16+H    ...   f64 LE: every parameter, then every Adam first moment, then
//!               every second moment, each in header order
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::models::{ModelDims, StudentModel};
use crate::train::{Moments, RunState, StepRecord, TrainConfig};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"RBVC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    dims: ModelDims,
    lambda: f64,
    step: u64,
    adam_t: u64,
    params: Vec<ParamInfo>,
    config: TrainConfig,
    lambda_trajectory: Vec<f64>,
    loss_history: Vec<StepRecord>,
}

#[derive(Serialize, Deserialize)]
struct ParamInfo {
    name: String,
    shape: Vec<usize>,
}

pub fn checkpoint_bytes(state: &RunState, config: &TrainConfig) -> Result<Vec<u8>> {
    let params = state.model.params();
    let header = Header {
        dims: state.model.dims,
        lambda: state.model.lambda(),
        step: state.step,
        adam_t: state.moments.t,
        params: params
            .iter()
            .zip(state.model.param_names())
            .map(|(p, n)| ParamInfo {
                name: (*n).into(),
                shape: p.shape().to_vec(),
            })
            .collect(),
        config: config.clone(),
        lambda_trajectory: state.lambda_trajectory.clone(),
        loss_history: state.loss_history.clone(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + json.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for group in [params, state.moments.m.iter().collect(), state.moments.v.iter().collect()] {
        for t in group {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    Ok(out)
}

pub fn save_checkpoint(state: &RunState, config: &TrainConfig, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, checkpoint_bytes(state, config)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(RunState, TrainConfig)> {
    let bytes = fs::read(path)?;
    let bad = |detail: String| Error::Format {
        path: path.display().to_string(),
        detail,
    };
    if bytes.len() < 16 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(bad("missing RBVC header".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body = bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated header".into()))?;
    let header: Header = serde_json::from_slice(body)?;

    let mut model = StudentModel::init(header.dims, 0)?;
    let shapes: Vec<Vec<usize>> = model.params().iter().map(|p| p.shape().to_vec()).collect();
    let names = model.param_names();
    if header.params.len() != shapes.len()
        || header
            .params
            .iter()
            .zip(shapes.iter().zip(names))
            .any(|(info, (s, n))| &info.shape != s || info.name != *n)
    {
        return Err(bad("parameter layout does not match the model".into()));
    }
    let count: usize = shapes.iter().map(|s| s.iter().product::<usize>()).sum();
    let blob = &bytes[16 + hlen..];
    if blob.len() != 3 * count * 8 {
        return Err(bad(format!("expected {} blob bytes, found {}", 3 * count * 8, blob.len())));
    }
    let mut floats = blob.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    let mut read_group = || -> Result<Vec<Tensor>> {
        shapes
            .iter()
            .map(|s| {
                let n = s.iter().product();
                Tensor::new(s.clone(), floats.by_ref().take(n).collect())
            })
            .collect()
    };
    let params = read_group()?;
    let m = read_group()?;
    let v = read_group()?;
    for (dst, src) in model.params_mut().into_iter().zip(params) {
        *dst = src;
    }
    let state = RunState {
        step: header.step,
        model,
        moments: Moments { m, v, t: header.adam_t },
        lambda_trajectory: header.lambda_trajectory,
        loss_history: header.loss_history,
    };
    Ok((state, header.config))
}
