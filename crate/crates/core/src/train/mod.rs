//! Optimization loop: AdamW, warmup plus cosine schedule, seeded batching,
//! run logging.

mod optim;

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use optim::{AdamW, Moments};

use crate::autodiff::Tensor;
use crate::corpus::{Corpus, Modality, SplitName};
use crate::error::{Error, Result};
use crate::losses::{total_loss, Ablations, Batch, LambdaMode, LossBundle, LossConfig, Metric, StructureSource};
use crate::models::{Embedder, ModelDims, StudentModel, TeacherModel, LAMBDA_INDEX};
use crate::Tape;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// `J`, pairs per batch.
    pub batch_size: usize,
    pub epochs: usize,
    pub lr_peak: f64,
    pub lr_floor: f64,
    pub weight_decay: f64,
    pub tau: f64,
    /// Temperature of the distillation terms; `None` shares `tau`.
    pub distill_tau: Option<f64>,
    pub metric: Metric,
    pub ablations: Ablations,
    pub lambda_mode: LambdaMode,
    pub structure_source: StructureSource,
    pub dims: ModelDims,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 36,
            epochs: 10,
            lr_peak: 1e-3,
            lr_floor: 1e-4,
            weight_decay: 0.1,
            tau: 0.1,
            distill_tau: None,
            metric: Metric::Mae,
            ablations: Ablations::none(),
            lambda_mode: LambdaMode::Learnable,
            structure_source: StructureSource::FusedCls,
            dims: ModelDims::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config("batch size must be at least 2".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        if !(self.lr_floor >= 0.0 && self.lr_floor <= self.lr_peak && self.lr_peak.is_finite()) {
            return Err(Error::Config(format!(
                "need 0 <= lr_floor ({}) <= lr_peak ({})",
                self.lr_floor, self.lr_peak
            )));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight decay must be non-negative".into()));
        }
        self.dims.validate()?;
        self.loss_config().validate()
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            tau: self.tau,
            distill_tau: self.distill_tau,
            metric: self.metric,
            ablations: self.ablations,
            lambda_mode: self.lambda_mode,
            structure_source: self.structure_source,
        }
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }
}

/// Linear warmup from 0 over the first epoch, then cosine from `lr_peak`
/// to `lr_floor` at `total_steps`.
pub fn lr_at(step: u64, total_steps: u64, config: &TrainConfig) -> f64 {
    let warmup = (total_steps / config.epochs.max(1) as u64).max(1);
    let (peak, floor) = (config.lr_peak, config.lr_floor);
    if step >= total_steps {
        return floor;
    }
    if step < warmup {
        return peak * step as f64 / warmup as f64;
    }
    let progress = (step - warmup) as f64 / (total_steps - warmup) as f64;
    floor + 0.5 * (peak - floor) * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Frozen teacher embeddings of every corpus instance, computed once.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherCache {
    pub image: Tensor,
    pub text: Tensor,
    pub image_hash: String,
    pub text_hash: String,
}

impl TeacherCache {
    pub fn compute(corpus: &Corpus, image: &TeacherModel, text: &TeacherModel) -> Result<Self> {
        if image.modality != Modality::Image || text.modality != Modality::Text {
            return Err(Error::Contract("teachers passed in the wrong modality order".into()));
        }
        let ids: Vec<usize> = (0..corpus.instances.len()).collect();
        Ok(Self {
            image: image.embed(corpus, &ids, Modality::Image)?,
            text: text.embed(corpus, &ids, Modality::Text)?,
            image_hash: image.param_hash(),
            text_hash: text.param_hash(),
        })
    }
}

/// One JSON-lines record of the run log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub itc: f64,
    pub itm: f64,
    pub iic: f64,
    pub ttc: f64,
    pub sa: f64,
    pub cr: f64,
    pub md: f64,
    pub total: f64,
    /// λ used by this step's objective.
    pub lambda: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunState {
    /// Optimizer steps taken.
    pub step: u64,
    pub model: StudentModel,
    pub moments: Moments,
    /// λ after each step, starting with the initial value.
    pub lambda_trajectory: Vec<f64>,
    pub loss_history: Vec<StepRecord>,
}

impl RunState {
    pub fn new(config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut model = StudentModel::init(config.dims, config.seed)?;
        if let LambdaMode::Fixed(l) = config.lambda_mode {
            model.lambda_logit = Tensor::scalar(logit(l))?;
        }
        let moments = Moments::zeros_like(model.params());
        let lambda_trajectory = vec![model.lambda()];
        Ok(Self {
            step: 0,
            model,
            moments,
            lambda_trajectory,
            loss_history: Vec::new(),
        })
    }

    pub fn lambda(&self) -> f64 {
        self.model.lambda()
    }
}

/// Inverse sigmoid, clamped so that the endpoints stay finite.
fn logit(p: f64) -> f64 {
    let p = p.clamp(1e-12, 1.0 - 1e-12);
    (p / (1.0 - p)).ln()
}

/// Independent deterministic stream for `(seed, purpose, index)`.
pub fn stream_rng(seed: u64, purpose: u64, index: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream((purpose << 48) | index);
    r
}

const STREAM_SHUFFLE: u64 = 1;
const STREAM_ITM: u64 = 2;

/// Steps per epoch; the last partial batch is dropped.
pub fn steps_per_epoch(corpus: &Corpus, config: &TrainConfig) -> Result<u64> {
    let n = corpus.split_ids(SplitName::Train).len();
    let s = n / config.batch_size;
    if s == 0 {
        return Err(Error::Config(format!(
            "train split of {n} is smaller than one batch of {}",
            config.batch_size
        )));
    }
    Ok(s as u64)
}

pub fn total_steps(corpus: &Corpus, config: &TrainConfig) -> Result<u64> {
    Ok(steps_per_epoch(corpus, config)? * config.epochs as u64)
}

/// Train ids for `epoch`, shuffled from the seeded stream.
pub fn epoch_order(corpus: &Corpus, config: &TrainConfig, epoch: usize) -> Vec<usize> {
    let mut ids = corpus.split_ids(SplitName::Train).to_vec();
    ids.shuffle(&mut stream_rng(config.seed, STREAM_SHUFFLE, epoch as u64));
    ids
}

/// One forward/backward pass and AdamW update. The λ logit is excluded from
/// weight decay.
pub fn train_step(state: &mut RunState, batch: &Batch, config: &TrainConfig, lr: f64) -> Result<LossBundle> {
    let mut tape = Tape::new();
    let vars = state.model.bind(&mut tape);
    let mut rng = stream_rng(config.seed, STREAM_ITM, state.step);
    let graph = total_loss(&mut tape, &vars, batch, &config.loss_config(), &mut rng)?;
    if !graph.bundle.is_finite() {
        return Err(Error::NonFinite(format!(
            "step {}: {}",
            state.step,
            serde_json::to_string(&graph.bundle)?
        )));
    }
    let grads = tape.backward(graph.total)?;
    let g: Vec<Tensor> = vars.all().into_iter().map(|v| grads.get(v)).collect();
    let mut decay = vec![true; g.len()];
    decay[LAMBDA_INDEX] = false;
    let opt = AdamW {
        weight_decay: config.weight_decay,
        ..AdamW::default()
    };
    opt.step(state.model.params_mut(), &g, &mut state.moments, lr, &decay)?;
    if let Some(i) = state.model.params().iter().position(|p| p.data().iter().any(|v| !v.is_finite())) {
        return Err(Error::NonFinite(format!(
            "step {}: parameter {} became non-finite (loss {})",
            state.step,
            state.model.param_names()[i],
            serde_json::to_string(&graph.bundle)?
        )));
    }
    let lambda = state.model.lambda();
    if !(lambda > 0.0 && lambda < 1.0) {
        return Err(Error::NonFinite(format!("step {}: lambda {lambda} left (0, 1)", state.step)));
    }
    state.step += 1;
    state.lambda_trajectory.push(lambda);
    Ok(graph.bundle)
}

/// Continues `state` until `stop_at` steps (or the end of training), writing
/// one JSON line per step to `log` when given.
pub fn run_steps(
    state: &mut RunState,
    corpus: &Corpus,
    teachers: &TeacherCache,
    config: &TrainConfig,
    stop_at: Option<u64>,
    mut log: Option<&mut dyn Write>,
) -> Result<()> {
    config.validate()?;
    let spe = steps_per_epoch(corpus, config)?;
    let total = spe * config.epochs as u64;
    let end = stop_at.map_or(total, |s| s.min(total));
    let j = config.batch_size;
    let mut cached: Option<(usize, Vec<usize>)> = None;
    while state.step < end {
        let epoch = (state.step / spe) as usize;
        let pos = (state.step % spe) as usize;
        if cached.as_ref().map(|c| c.0) != Some(epoch) {
            cached = Some((epoch, epoch_order(corpus, config, epoch)));
        }
        let order = &cached.as_ref().expect("order cached").1;
        let batch = Batch::assemble(corpus, &order[pos * j..(pos + 1) * j], &teachers.image, &teachers.text)?;
        let lr = lr_at(state.step + 1, total, config);
        let step = state.step;
        let b = train_step(state, &batch, config, lr)?;
        let rec = StepRecord {
            step,
            epoch,
            lr,
            itc: b.itc,
            itm: b.itm,
            iic: b.iic,
            ttc: b.ttc,
            sa: b.sa,
            cr: b.cr,
            md: b.md,
            total: b.total,
            lambda: b.lambda_value,
        };
        if let Some(w) = log.as_deref_mut() {
            serde_json::to_writer(&mut *w, &rec)?;
            w.write_all(b"\n")?;
        }
        state.loss_history.push(rec);
    }
    Ok(())
}

/// Full training run from a fresh initialization.
pub fn train_run(corpus: &Corpus, teachers: &TeacherCache, config: &TrainConfig) -> Result<RunState> {
    let mut state = RunState::new(config)?;
    run_steps(&mut state, corpus, teachers, config, None, None)?;
    Ok(state)
}

/// Mean total loss over the last epoch of a history.
pub fn last_epoch_loss(history: &[StepRecord]) -> Option<f64> {
    let last = history.last()?.epoch;
    let tail: Vec<f64> = history.iter().filter(|r| r.epoch == last).map(|r| r.total).collect();
    Some(tail.iter().sum::<f64>() / tail.len() as f64)
}

#[cfg(test)]
mod tests;
