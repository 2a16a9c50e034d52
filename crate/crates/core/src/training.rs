//! Optimization: Adam with decoupled weight decay, global-norm clipping,
//! step-decay learning rate, early stopping, the training loop and the
//! binary checkpoint container.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Splits, Window};
use crate::diff::{DropoutStream, Tape, Tensor};
use crate::error::{Error, Result};
use crate::model::{target_level, Batch, InputNorm, LossParts, Model, ModelSpec, StaticContext};
use crate::nn::Bound;
use crate::uncertainty::UqConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    /// Multiplier applied every `lr_decay_every` epochs.
    pub lr_decay: f64,
    pub lr_decay_every: usize,
    /// Decoupled weight decay, applied when `decoupled_weight_decay` is set.
    pub weight_decay: f64,
    pub decoupled_weight_decay: bool,
    pub max_epochs: usize,
    pub patience: usize,
    /// End at the best validation parameters rather than the last ones.
    pub restore_best: bool,
    pub clip_norm: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 128,
            lr: 1e-3,
            lr_decay: 0.5,
            lr_decay_every: 15,
            weight_decay: 5e-4,
            decoupled_weight_decay: true,
            max_epochs: 100,
            patience: 50,
            restore_best: true,
            clip_norm: 1.0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let checks: [(&str, bool, &str); 9] = [
            (
                "train.batch_size",
                self.batch_size >= 1,
                "must be at least 1",
            ),
            (
                "train.lr",
                self.lr > 0.0 && self.lr.is_finite(),
                "must be positive",
            ),
            (
                "train.lr_decay",
                self.lr_decay > 0.0 && self.lr_decay <= 1.0,
                "must lie in (0, 1]",
            ),
            (
                "train.lr_decay_every",
                self.lr_decay_every >= 1,
                "must be at least 1",
            ),
            (
                "train.weight_decay",
                self.weight_decay >= 0.0,
                "must be non-negative",
            ),
            ("train.patience", self.patience >= 1, "must be at least 1"),
            ("train.clip_norm", self.clip_norm > 0.0, "must be positive"),
            (
                "train.beta1",
                (0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2),
                "betas must lie in [0, 1)",
            ),
            ("train.adam_eps", self.adam_eps > 0.0, "must be positive"),
        ];
        for (field, ok, reason) in checks {
            if !ok {
                return Err(Error::config(field, reason));
            }
        }
        if self.max_epochs == 0 {
            return Err(Error::config("train.max_epochs", "must be at least 1"));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamParams {
        AdamParams {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
            weight_decay: if self.decoupled_weight_decay {
                self.weight_decay
            } else {
                0.0
            },
        }
    }
}

/// `lr₀ · γ^⌊epoch / every⌋` for a zero-based epoch index.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    cfg.lr * cfg.lr_decay.powi((epoch / cfg.lr_decay_every) as i32)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

/// First and second moments plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        AdamState {
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            t: 0,
        }
    }
}

/// One bias-corrected Adam update; weight decay, if any, is decoupled
/// from the gradient.
pub fn adam_step(
    params: &mut [Tensor],
    grads: &[Tensor],
    state: &mut AdamState,
    lr: f64,
    hp: AdamParams,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() || params.len() != state.v.len()
    {
        return Err(Error::Contract(
            "adam_step: parameter, gradient and moment counts differ".into(),
        ));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape()
            || p.shape() != state.m[i].shape()
            || p.shape() != state.v[i].shape()
        {
            return Err(Error::Contract(format!(
                "adam_step: shape mismatch at {}: {:?} vs {:?}",
                i,
                p.shape(),
                g.shape()
            )));
        }
    }
    state.t += 1;
    let c1 = 1.0 - hp.beta1.powi(state.t as i32);
    let c2 = 1.0 - hp.beta2.powi(state.t as i32);
    for (i, p) in params.iter_mut().enumerate() {
        let g = grads[i].data();
        let m = state.m[i].data_mut();
        for (mk, gk) in m.iter_mut().zip(g) {
            *mk = hp.beta1 * *mk + (1.0 - hp.beta1) * gk;
        }
        let v = state.v[i].data_mut();
        for (vk, gk) in v.iter_mut().zip(g) {
            *vk = hp.beta2 * *vk + (1.0 - hp.beta2) * gk * gk;
        }
        let (m, v) = (state.m[i].data(), state.v[i].data());
        for (k, pk) in p.data_mut().iter_mut().enumerate() {
            let step = (m[k] / c1) / ((v[k] / c2).sqrt() + hp.eps);
            *pk -= lr * (step + hp.weight_decay * *pk);
        }
    }
    Ok(())
}

/// Scales all gradients by `c / ‖g‖₂` when the global norm exceeds `c`.
/// Returns the norm before clipping.
pub fn clip_gradients(grads: &mut [Tensor], clip_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if norm > clip_norm {
        let s = clip_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Continue,
    Stop,
}

/// Tracks the best validation loss; stops after `patience` evaluations
/// without improvement.
#[derive(Clone, Debug)]
pub struct EarlyStopper {
    pub patience: usize,
    pub best: f64,
    pub best_epoch: usize,
    stale: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        EarlyStopper {
            patience,
            best: f64::INFINITY,
            best_epoch: 0,
            stale: 0,
        }
    }

    pub fn update(&mut self, epoch: usize, val: f64) -> StopDecision {
        if val < self.best {
            self.best = val;
            self.best_epoch = epoch;
            self.stale = 0;
            StopDecision::Improved
        } else {
            self.stale += 1;
            if self.stale >= self.patience {
                StopDecision::Stop
            } else {
                StopDecision::Continue
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train: LossParts,
    pub val_total: f64,
}

/// Everything the training loop reads.
#[derive(Clone, Debug)]
pub struct TrainData {
    pub ctx: StaticContext,
    pub windows: Vec<Window>,
    pub splits: Splits,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val: f64,
    pub optimizer: AdamState,
}

/// Eval-mode objective averaged over windows in `range`.
pub fn evaluate_loss(
    model: &Model,
    data: &TrainData,
    idx: &[usize],
    uq: &UqConfig,
    batch_size: usize,
) -> Result<LossParts> {
    let mut acc = LossParts::default();
    for chunk in idx.chunks(batch_size) {
        let batch = Batch::from_windows(&data.windows, chunk)?;
        let tape = Tape::new();
        let bp = Bound::new(&tape, &model.store, false);
        let (_, parts) = model.loss(&bp, &data.ctx, &batch, uq, &[DropoutStream::eval()])?;
        acc.accumulate(&parts, chunk.len() as f64 / idx.len() as f64);
    }
    Ok(acc)
}

/// Minibatch training with early stopping; the model ends at its best
/// validation parameters unless `restore_best` is off.
pub fn train(
    model: &mut Model,
    data: &TrainData,
    cfg: &TrainConfig,
    uq: &UqConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    uq.validate()?;
    if data.splits.train.is_empty() || data.splits.val.is_empty() {
        return Err(Error::Contract(
            "training needs non-empty train and validation splits".into(),
        ));
    }
    let passes = model.spec.variant.train_passes(uq);
    let val_idx: Vec<usize> = data.splits.val.clone().collect();
    let mut order: Vec<usize> = data.splits.train.clone().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7472_6169_6e00);
    let mut adam = AdamState::new(model.store.values());
    let hp = cfg.adam();
    let mut stopper = EarlyStopper::new(cfg.patience);
    let mut best_params = model.store.values().to_vec();
    let mut history = Vec::new();
    let mut step = 0u64;
    for epoch in 1..=cfg.max_epochs {
        let lr = lr_at(epoch - 1, cfg);
        order.shuffle(&mut rng);
        let mut train_parts = LossParts::default();
        for chunk in order.chunks(cfg.batch_size) {
            let batch = Batch::from_windows(&data.windows, chunk)?;
            let streams: Vec<DropoutStream> = (0..passes)
                .map(|p| DropoutStream::train(seed, step, p as u64))
                .collect();
            let tape = Tape::new();
            let bp = Bound::new(&tape, &model.store, true);
            let (loss, parts) = model.loss(&bp, &data.ctx, &batch, uq, &streams)?;
            tape.backward(loss)?;
            let mut grads = bp.grads();
            drop(bp);
            drop(tape);
            if grads.iter().any(|g| !g.all_finite()) {
                return Err(Error::NonFinite {
                    component: "gradient".into(),
                });
            }
            clip_gradients(&mut grads, cfg.clip_norm);
            adam_step(model.store.values_mut(), &grads, &mut adam, lr, hp)?;
            train_parts.accumulate(&parts, chunk.len() as f64 / order.len() as f64);
            step += 1;
        }
        let val = evaluate_loss(model, data, &val_idx, uq, cfg.batch_size)?;
        if !val.total.is_finite() {
            return Err(Error::NonFinite {
                component: "val_total".into(),
            });
        }
        history.push(EpochRecord {
            epoch,
            lr,
            train: train_parts,
            val_total: val.total,
        });
        match stopper.update(epoch, val.total) {
            StopDecision::Improved => best_params = model.store.values().to_vec(),
            StopDecision::Continue => {}
            StopDecision::Stop => break,
        }
    }
    if cfg.restore_best {
        for (dst, src) in model.store.values_mut().iter_mut().zip(best_params) {
            *dst = src;
        }
    }
    Ok(TrainOutcome {
        history,
        best_epoch: stopper.best_epoch,
        best_val: stopper.best,
        optimizer: adam,
    })
}

/// Fresh model with the input standardized and the output heads started at
/// the training target level.
pub fn init_model(spec: ModelSpec, data: &TrainData, seed: u64) -> Result<Model> {
    let n_cat = spec.n_categories;
    let idx: Vec<usize> = data.splits.train.clone().collect();
    let spec = ModelSpec {
        input_norm: Some(InputNorm::fit(&data.windows, &idx, n_cat)),
        ..spec
    };
    let mut model = Model::new(spec, seed)?;
    model.init_output_bias(&target_level(&data.windows, &idx, n_cat))?;
    Ok(model)
}

pub fn write_history<W: Write>(history: &[EpochRecord], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    let mut head = vec!["epoch".to_string(), "lr".to_string()];
    head.extend(LossParts::NAMES.iter().map(|n| n.to_string()));
    head.push("val_total".into());
    wr.write_record(&head)?;
    for r in history {
        let mut row = vec![r.epoch.to_string(), r.lr.to_string()];
        row.extend(r.train.values().iter().map(|v| v.to_string()));
        row.push(r.val_total.to_string());
        wr.write_record(&row)?;
    }
    wr.flush()?;
    Ok(())
}

// ------------------------------------------------------------- checkpoint

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"STVCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the data section, in f64 elements.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub spec: ModelSpec,
    pub epoch: usize,
    pub best_val: f64,
    pub adam_step: u64,
    /// Resolved run configuration, echoed for provenance.
    pub config: serde_json::Value,
    pub params: Vec<TensorEntry>,
    pub first_moments: Vec<TensorEntry>,
    pub second_moments: Vec<TensorEntry>,
}

/// Parameters, optimizer moments and metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: Vec<Tensor>,
    pub optimizer: AdamState,
}

impl Checkpoint {
    pub fn capture(model: &Model, outcome: &TrainOutcome, config: serde_json::Value) -> Checkpoint {
        Checkpoint {
            header: CheckpointHeader {
                format_version: CHECKPOINT_VERSION,
                spec: model.spec.clone(),
                epoch: outcome.best_epoch,
                best_val: outcome.best_val,
                adam_step: outcome.optimizer.t,
                config,
                params: Vec::new(),
                first_moments: Vec::new(),
                second_moments: Vec::new(),
            },
            params: model.store.values().to_vec(),
            optimizer: outcome.optimizer.clone(),
        }
    }

    pub fn to_bytes(&self, names: &[String]) -> Result<Vec<u8>> {
        let mut header = self.header.clone();
        let mut offset = 0usize;
        let mut entries = |tensors: &[Tensor], suffix: &str| -> Vec<TensorEntry> {
            tensors
                .iter()
                .zip(names)
                .map(|(t, n)| {
                    let e = TensorEntry {
                        name: format!("{}{}", n, suffix),
                        shape: t.shape().to_vec(),
                        offset,
                    };
                    offset += t.len();
                    e
                })
                .collect()
        };
        header.params = entries(&self.params, "");
        header.first_moments = entries(&self.optimizer.m, ".m");
        header.second_moments = entries(&self.optimizer.v, ".v");
        header.adam_step = self.optimizer.t;
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(20 + json.len() + 8 * offset);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in self
            .params
            .iter()
            .chain(&self.optimizer.m)
            .chain(&self.optimizer.v)
        {
            for x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let bad = |why: &str| Error::Format(format!("checkpoint: {}", why));
        if bytes.len() < 20 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(bad("bad magic"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(bad(&format!("unsupported version {}", version)));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = bytes.get(20..).ok_or_else(|| bad("truncated"))?;
        if body.len() < hlen {
            return Err(bad("truncated header"));
        }
        let header: CheckpointHeader = serde_json::from_slice(&body[..hlen])?;
        let data = &body[hlen..];
        if data.len() % 8 != 0 {
            return Err(bad("data section is not a whole number of f64"));
        }
        let floats: Vec<f64> = data
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let read = |entries: &[TensorEntry]| -> Result<Vec<Tensor>> {
            entries
                .iter()
                .map(|e| {
                    let len: usize = e.shape.iter().product();
                    let slice = floats
                        .get(e.offset..e.offset + len)
                        .ok_or_else(|| bad(&format!("tensor {} runs past the data", e.name)))?;
                    Tensor::new(&e.shape, slice.to_vec())
                })
                .collect()
        };
        let params = read(&header.params)?;
        let m = read(&header.first_moments)?;
        let v = read(&header.second_moments)?;
        let t = header.adam_step;
        Ok(Checkpoint {
            header,
            params,
            optimizer: AdamState { m, v, t },
        })
    }

    pub fn save(&self, model: &Model, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes(model.store.names())?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        Checkpoint::from_bytes(&fs::read(path)?)
    }

    /// Rebuilds the model and installs the stored parameters by name.
    pub fn model(&self) -> Result<Model> {
        let mut model = Model::new(self.header.spec.clone(), 0)?;
        if self.header.params.len() != model.store.len() {
            return Err(Error::Format(format!(
                "checkpoint holds {} tensors, model expects {}",
                self.header.params.len(),
                model.store.len()
            )));
        }
        for (entry, value) in self.header.params.iter().zip(&self.params) {
            let id = model.store.find(&entry.name).ok_or_else(|| {
                Error::Format(format!(
                    "checkpoint tensor {} unknown to the model",
                    entry.name
                ))
            })?;
            model.store.set(id, value.clone())?;
        }
        Ok(model)
    }
}
