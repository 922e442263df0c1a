//! SGD with momentum under a poly schedule, the end-to-end and two-stage
//! regimes, and the checksummed checkpoint format.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{batch_iter, Batch, LabeledCase, SliceStack};
use crate::error::{Error, Result};
use crate::eval::{mean_foreground_dice, segment_volume};
use crate::loss::{class_weight_map, poly_lr, record_total_loss, LabelFrequencies, LossBundle, LossTargets};
use crate::model::{build_model, AcenetConfig, ModelParams};
use crate::params::{derive_seed, Mode, ParamStore, Session};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// Backbone only: no skull head, no skull losses.
    Stage1,
    /// Full model fine-tuned from a stage-1 checkpoint.
    Stage2,
    EndToEnd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub stage: Stage,
    pub base_lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub power: f64,
    pub lambda_sec: f64,
    pub class_weights: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            stage: Stage::EndToEnd,
            base_lr: 0.01,
            epochs: 100,
            batch_size: 6,
            momentum: 0.9,
            weight_decay: 1e-4,
            power: crate::loss::POLY_POWER,
            lambda_sec: crate::loss::DEFAULT_LAMBDA_SEC,
            class_weights: true,
            seed: 0,
        }
    }
}

/// Stage-1 learning rate for fine-grained label protocols.
pub const FINE_GRAINED_LR: f64 = 0.02;

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return bad(format!("base_lr {} must be finite and >= 0", self.base_lr));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum {} outside [0,1)", self.momentum));
        }
        if !(self.weight_decay >= 0.0 && self.power > 0.0 && self.lambda_sec >= 0.0) {
            return bad("weight_decay and lambda_sec must be >= 0, power > 0".into());
        }
        if self.seed > i64::MAX as u64 {
            return bad(format!("seed {} exceeds {}", self.seed, i64::MAX));
        }
        Ok(())
    }
}

/// Per-parameter velocities, in parameter order.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub velocities: Vec<Tensor>,
}

impl OptimizerState {
    pub fn new(store: &ParamStore) -> Self {
        OptimizerState {
            velocities: store.iter().map(|(_, _, t)| Tensor::zeros(t.shape().to_vec())).collect(),
        }
    }
}

/// `g' = g + wd*theta; v = momentum*v + g'; theta -= lr*v`. A missing gradient
/// counts as zero.
pub fn sgd_step(
    store: &mut ParamStore,
    grads: &[Option<Tensor>],
    state: &mut OptimizerState,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if grads.len() != store.len() || state.velocities.len() != store.len() {
        return Err(Error::contract(
            "sgd_step",
            format!(
                "{} gradients and {} velocities for {} parameters",
                grads.len(),
                state.velocities.len(),
                store.len()
            ),
        ));
    }
    for (id, g) in store.ids().zip(grads) {
        if let Some(g) = g {
            if g.shape() != store.get(id).shape() {
                return Err(Error::contract("sgd_step", format!("gradient shape mismatch for {}", store.name(id))));
            }
            if !g.all_finite() {
                return Err(Error::Training(format!("non-finite gradient for {}", store.name(id))));
            }
        }
    }
    for (id, g) in store.ids().collect::<Vec<_>>().into_iter().zip(grads) {
        let v = state.velocities[id.index()].data_mut();
        let theta = store.get_mut(id).data_mut();
        for (i, (t, vi)) in theta.iter_mut().zip(v.iter_mut()).enumerate() {
            let gi = g.as_ref().map_or(0.0, |g| g.data()[i]) + weight_decay * *t;
            *vi = momentum * *vi + gi;
            *t -= lr * *vi;
        }
    }
    Ok(())
}

/// Everything needed to resume or evaluate a run.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: AcenetConfig,
    pub train: TrainConfig,
    pub params: ParamStore,
    pub optimizer: OptimizerState,
    pub epoch: usize,
    pub iter: usize,
    /// Mean total training loss per epoch.
    pub loss_history: Vec<f64>,
    /// Mean foreground validation Dice per epoch, when a validation set is used.
    pub val_history: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigSnapshot {
    model: AcenetConfig,
    train: TrainConfig,
}

const MAGIC: &[u8; 8] = b"ACENETCK";
const FORMAT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: usize) {
        self.0.extend_from_slice(&(v as u64).to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend_from_slice(s.as_bytes());
    }
    fn f64s(&mut self, v: &[f64]) {
        self.u64(v.len());
        for x in v {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }
    fn tensor(&mut self, t: &Tensor) {
        self.u32(t.rank() as u32);
        for &d in t.shape() {
            self.u64(d);
        }
        for x in t.data() {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint(format!("truncated while reading {what}")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
    fn u64(&mut self, what: &str) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8, what)?.try_into().unwrap());
        usize::try_from(v).map_err(|_| Error::Checkpoint(format!("{what} {v} too large")))
    }
    fn str(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)? as usize;
        String::from_utf8(self.take(n, what)?.to_vec()).map_err(|_| Error::Checkpoint(format!("{what} is not UTF-8")))
    }
    fn f64_vec(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint(format!("{what} length")))?, what)?;
        Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
    fn f64s(&mut self, what: &str) -> Result<Vec<f64>> {
        let n = self.u64(what)?;
        self.f64_vec(n, what)
    }
    fn tensor(&mut self, what: &str) -> Result<Tensor> {
        let rank = self.u32(what)? as usize;
        let shape = (0..rank).map(|_| self.u64(what)).collect::<Result<Vec<_>>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Checkpoint(format!("{what}: shape overflow")))?;
        let data = self.f64_vec(n, what)?;
        Tensor::new(shape, data).map_err(|e| Error::Checkpoint(format!("{what}: {e}")))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let snapshot = ConfigSnapshot {
            model: self.model.clone(),
            train: self.train.clone(),
        };
        let config = toml::to_string(&snapshot).map_err(|e| Error::Checkpoint(format!("config: {e}")))?;
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u32(FORMAT_VERSION);
        w.u64(0); // total length, patched below
        w.str(&config);
        w.u64(self.epoch);
        w.u64(self.iter);
        w.f64s(&self.loss_history);
        w.f64s(&self.val_history);
        w.u64(self.params.len());
        for (id, name, t) in self.params.iter() {
            w.str(name);
            w.tensor(t);
            w.tensor(&self.optimizer.velocities[id.index()]);
        }
        w.u64(self.params.stats().len());
        for s in self.params.stats() {
            w.str(&s.name);
            w.f64s(&s.mean);
            w.f64s(&s.var);
        }
        let total = w.0.len() + DIGEST_LEN;
        w.0[12..20].copy_from_slice(&(total as u64).to_le_bytes());
        let digest = Sha256::digest(&w.0);
        w.0.extend_from_slice(&digest);
        Ok(w.0)
    }

    /// Parses and checks integrity, then validates every tensor name and
    /// shape against the embedded model configuration.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 + DIGEST_LEN || &bytes[..8] != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("format version {version}, expected {FORMAT_VERSION}")));
        }
        let declared = u64::from_le_bytes(bytes[12..20].try_into().unwrap());
        if declared != bytes.len() as u64 {
            return Err(Error::Checkpoint(format!("length field {declared}, file has {} bytes", bytes.len())));
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Checkpoint("checksum mismatch".into()));
        }
        let mut r = Reader { buf: body, pos: 20 };
        let config = r.str("config")?;
        let snapshot: ConfigSnapshot = toml::from_str(&config).map_err(|e| Error::Checkpoint(format!("config: {e}")))?;
        snapshot.model.validate()?;
        let epoch = r.u64("epoch")?;
        let iter = r.u64("iter")?;
        let loss_history = r.f64s("loss history")?;
        let val_history = r.f64s("validation history")?;
        let count = r.u64("parameter count")?;
        let mut params = ParamStore::new();
        let mut velocities = Vec::new();
        for _ in 0..count {
            let name = r.str("parameter name")?;
            let value = r.tensor(&name)?;
            let velocity = r.tensor(&name)?;
            if velocity.shape() != value.shape() {
                return Err(Error::Checkpoint(format!("{name}: velocity shape {:?} differs from parameter {:?}", velocity.shape(), value.shape())));
            }
            params.add(name, value);
            velocities.push(velocity);
        }
        let stats = r.u64("statistics count")?;
        for _ in 0..stats {
            let name = r.str("statistics name")?;
            let mean = r.f64s(&name)?;
            let var = r.f64s(&name)?;
            if mean.len() != var.len() {
                return Err(Error::Checkpoint(format!("{name}: mean and variance lengths differ")));
            }
            let id = params.add_stats(name, mean.len());
            let s = &mut params.stats_mut()[id.index()];
            s.mean = mean;
            s.var = var;
        }
        if r.pos != body.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", body.len() - r.pos)));
        }
        let ck = Checkpoint {
            model: snapshot.model,
            train: snapshot.train,
            params,
            optimizer: OptimizerState { velocities },
            epoch,
            iter,
            loss_history,
            val_history,
        };
        check_layout(&ck.params, &ck.model)?;
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }

    /// The stored weights as a model for `config`, which must have exactly
    /// the same tensor set.
    pub fn model_for(&self, config: &AcenetConfig) -> Result<ModelParams> {
        let mut m = build_model(config, 0)?;
        check_layout(&self.params, config)?;
        m.store = self.params.clone();
        Ok(m)
    }

    pub fn into_model(self) -> Result<ModelParams> {
        let config = self.model.clone();
        self.model_for(&config)
    }
}

/// Names, order and shapes of `store` must match a model built from `config`.
pub fn check_layout(store: &ParamStore, config: &AcenetConfig) -> Result<()> {
    let expected = build_model(config, 0)?;
    let want: Vec<(&str, &[usize])> = expected.store.iter().map(|(_, n, t)| (n, t.shape())).collect();
    let have: Vec<(&str, &[usize])> = store.iter().map(|(_, n, t)| (n, t.shape())).collect();
    if want.len() != have.len() || want.iter().zip(&have).any(|(a, b)| a.0 != b.0) {
        let missing: Vec<&str> = want.iter().filter(|w| !have.iter().any(|h| h.0 == w.0)).map(|w| w.0).collect();
        let extra: Vec<&str> = have.iter().filter(|h| !want.iter().any(|w| w.0 == h.0)).map(|h| h.0).collect();
        return Err(Error::Checkpoint(format!(
            "tensor set does not match the configuration: missing {missing:?}, unexpected {extra:?}"
        )));
    }
    for (w, h) in want.iter().zip(&have) {
        if w.1 != h.1 {
            return Err(Error::Checkpoint(format!("tensor {}: shape {:?}, configuration needs {:?}", h.0, h.1, w.1)));
        }
    }
    let ws: Vec<(&str, usize)> = expected.store.stats().iter().map(|s| (s.name.as_str(), s.mean.len())).collect();
    let hs: Vec<(&str, usize)> = store.stats().iter().map(|s| (s.name.as_str(), s.mean.len())).collect();
    if ws != hs {
        return Err(Error::Checkpoint("normalization statistics do not match the configuration".into()));
    }
    Ok(())
}

/// Copies every tensor and normalization buffer of `from` whose name exists
/// in `to`. Returns the number of copied tensors.
pub fn copy_shared(from: &ParamStore, to: &mut ParamStore) -> Result<usize> {
    let mut copied = 0;
    for (_, name, t) in from.iter() {
        if let Some(id) = to.find(name) {
            to.set(id, t.clone())
                .map_err(|_| Error::Checkpoint(format!("tensor {name}: shape {:?} does not fit", t.shape())))?;
            copied += 1;
        }
    }
    for s in from.stats() {
        if let Some(dst) = to.stats_mut().iter_mut().find(|d| d.name == s.name) {
            if dst.mean.len() != s.mean.len() {
                return Err(Error::Checkpoint(format!("statistics {}: channel count differs", s.name)));
            }
            dst.mean.clone_from(&s.mean);
            dst.var.clone_from(&s.var);
        }
    }
    Ok(copied)
}

/// Progress hooks. Every method has a no-op default.
pub trait TrainObserver {
    fn on_step(&mut self, _iter: usize, _lr: f64, _loss: &LossBundle) {}
    fn on_epoch(&mut self, _epoch: usize, _mean_loss: f64, _val_dice: Option<f64>) {}
}

impl TrainObserver for () {}

pub fn batches_per_epoch(cases: &[LabeledCase], batch_size: usize) -> usize {
    cases.iter().map(|c| c.dims()[0]).sum::<usize>().div_ceil(batch_size)
}

fn weight_map(stacks: &[SliceStack], freqs: &LabelFrequencies) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for st in stacks {
        let [h, w] = [st.input.shape()[1], st.input.shape()[2]];
        out.extend(class_weight_map(&st.center_labels, h, w, freqs)?);
    }
    Ok(out)
}

/// One forward/backward/update on a batch. Returns the loss terms.
pub fn train_step(
    model: &mut ModelParams,
    state: &mut OptimizerState,
    stacks: &[SliceStack],
    freqs: Option<&LabelFrequencies>,
    cfg: &TrainConfig,
    lr: f64,
    dropout_seed: u64,
) -> Result<LossBundle> {
    let batch = Batch::assemble(stacks)?;
    let weights = freqs.map(|f| weight_map(stacks, f)).transpose()?;
    let (grads, stats, bundle) = {
        let mut sess = Session::new(&model.store, Mode::Train, dropout_seed);
        let x = sess.graph.constant(batch.input);
        let nodes = model.forward(&mut sess, x)?;
        let targets = LossTargets {
            labels: &batch.labels,
            skull: &batch.skull,
            presence: &batch.presence,
            weights: weights.as_deref(),
        };
        let (loss, bundle) = record_total_loss(
            &mut sess.graph,
            nodes.brain_logits,
            nodes.skull_logits,
            nodes.presence_logits,
            &targets,
            cfg.lambda_sec,
        )?;
        if !bundle.l_total.is_finite() {
            return Ok(bundle);
        }
        let (grads, stats) = sess.backward(loss)?;
        (grads, stats, bundle)
    };
    sgd_step(&mut model.store, &grads, state, lr, cfg.momentum, cfg.weight_decay)?;
    model.store.apply_stat_updates(&stats);
    Ok(bundle)
}

fn diverged(model: &ModelParams, state: &OptimizerState, mut ck: Checkpoint, epoch: usize, iter: usize, loss: f64) -> Error {
    ck.params = model.store.clone();
    ck.optimizer = state.clone();
    ck.epoch = epoch;
    ck.iter = iter;
    Error::Diverged {
        iter,
        loss,
        last_good: Box::new(ck),
    }
}

fn validation_dice(model: &ModelParams, val: &[LabeledCase]) -> Result<f64> {
    let mut total = 0.0;
    for case in val {
        let seg = segment_volume(model, &case.intensity)?;
        total += mean_foreground_dice(&seg.labels, &case.labels, model.config.num_structures)?;
    }
    Ok(total / val.len() as f64)
}

/// Trains `model` in place for `cfg.epochs` epochs from a fresh optimizer
/// state and schedule. With a validation set, the epoch with the best mean
/// foreground Dice is kept; otherwise the final weights are.
pub fn run_training(
    model: &mut ModelParams,
    cases: &[LabeledCase],
    validation: Option<&[LabeledCase]>,
    cfg: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<Checkpoint> {
    cfg.validate()?;
    if cases.is_empty() {
        return Err(Error::Training("no training cases".into()));
    }
    match (cfg.stage, model.config.skull_module) {
        (Stage::Stage1, true) => {
            return Err(Error::Config("stage 1 trains without the skull module; set skull_module = false".into()))
        }
        (Stage::Stage2, false) => return Err(Error::Config("stage 2 needs skull_module = true".into())),
        _ => {}
    }
    let n = model.config.num_structures;
    let size = model.config.input_size;
    let prepared: Vec<LabeledCase> = cases.iter().cloned().map(LabeledCase::normalized).collect();
    let val: Option<Vec<LabeledCase>> = validation
        .filter(|v| !v.is_empty())
        .map(|v| v.iter().cloned().map(LabeledCase::normalized).collect());
    for case in prepared.iter().chain(val.iter().flatten()) {
        let [_, h, w] = case.dims();
        if h != size || w != size {
            return Err(Error::contract("run_training", format!("case slices are {h}x{w}, model expects {size}x{size}")));
        }
    }
    let freqs = if cfg.class_weights {
        let labels: Vec<Vec<usize>> = prepared.iter().map(|c| c.labels.labels()).collect::<Result<_>>()?;
        Some(LabelFrequencies::from_labels(labels.iter().map(Vec::as_slice), n)?)
    } else {
        None
    };

    let per_epoch = batches_per_epoch(&prepared, cfg.batch_size);
    let iter_total = cfg.epochs * per_epoch;
    let mut state = OptimizerState::new(&model.store);
    let mut ck = Checkpoint {
        model: model.config.clone(),
        train: cfg.clone(),
        params: ParamStore::new(),
        optimizer: OptimizerState { velocities: Vec::new() },
        epoch: 0,
        iter: 0,
        loss_history: Vec::new(),
        val_history: Vec::new(),
    };
    let mut best: Option<(f64, ParamStore)> = None;
    let mut iter = 0;
    for epoch in 0..cfg.epochs {
        let mut sum = 0.0;
        let mut count = 0;
        for stacks in batch_iter(&prepared, cfg.batch_size, model.config.s, n, Some(derive_seed(cfg.seed, epoch as u64)))? {
            let stacks = stacks?;
            let lr = poly_lr(cfg.base_lr, iter, iter_total, cfg.power)?;
            let seed = derive_seed(cfg.seed ^ 0x5EED, iter as u64);
            // A failed step leaves parameters and velocities untouched.
            let bundle = match train_step(model, &mut state, &stacks, freqs.as_ref(), cfg, lr, seed) {
                Ok(b) if b.l_total.is_finite() => b,
                Ok(b) => return Err(diverged(model, &state, ck, epoch, iter, b.l_total)),
                Err(Error::Training(_)) => return Err(diverged(model, &state, ck, epoch, iter, f64::NAN)),
                Err(e) => return Err(e),
            };
            observer.on_step(iter, lr, &bundle);
            sum += bundle.l_total;
            count += 1;
            iter += 1;
        }
        let mean = sum / count as f64;
        ck.loss_history.push(mean);
        let val_dice = match &val {
            Some(v) => {
                let d = validation_dice(model, v)?;
                ck.val_history.push(d);
                if best.as_ref().is_none_or(|(b, _)| d > *b) {
                    best = Some((d, model.store.clone()));
                }
                Some(d)
            }
            None => None,
        };
        observer.on_epoch(epoch, mean, val_dice);
    }
    if let Some((_, store)) = best {
        model.store = store;
    }
    ck.params = model.store.clone();
    ck.optimizer = state;
    ck.epoch = cfg.epochs;
    ck.iter = iter;
    Ok(ck)
}

/// Stage 1 without the skull head, then stage 2 on the full model starting
/// from every stage-1 tensor, with fresh skull-head weights, optimizer state
/// and schedule. Returns both checkpoints.
pub fn two_stage_train(
    cases: &[LabeledCase],
    validation: Option<&[LabeledCase]>,
    model_cfg: &AcenetConfig,
    stage1: &TrainConfig,
    stage2: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<(Checkpoint, Checkpoint)> {
    let cfg1 = AcenetConfig {
        skull_module: false,
        ..model_cfg.clone()
    };
    let cfg2 = AcenetConfig {
        skull_module: true,
        ..model_cfg.clone()
    };
    let t1 = TrainConfig {
        stage: Stage::Stage1,
        ..stage1.clone()
    };
    let t2 = TrainConfig {
        stage: Stage::Stage2,
        ..stage2.clone()
    };
    let mut m1 = build_model(&cfg1, stage1.seed)?;
    let ck1 = run_training(&mut m1, cases, validation, &t1, observer)?;
    let mut m2 = init_stage2(&ck1, &cfg2, stage2.seed)?;
    let ck2 = run_training(&mut m2, cases, validation, &t2, observer)?;
    Ok((ck1, ck2))
}

/// A skull-enabled model whose shared tensors come from a stage-1 checkpoint.
pub fn init_stage2(stage1: &Checkpoint, config: &AcenetConfig, seed: u64) -> Result<ModelParams> {
    if !config.skull_module {
        return Err(Error::Config("stage 2 needs skull_module = true".into()));
    }
    let backbone = AcenetConfig {
        skull_module: false,
        ..config.clone()
    };
    if backbone != stage1.model {
        return Err(Error::Checkpoint(
            "stage-1 checkpoint architecture differs from the stage-2 configuration".into(),
        ));
    }
    let mut m = build_model(config, seed)?;
    copy_shared(&stage1.params, &mut m.store)?;
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(v: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("w", Tensor::scalar(v));
        s
    }

    #[test]
    fn vanilla_step() {
        let mut s = one_param(1.0);
        let mut st = OptimizerState::new(&s);
        sgd_step(&mut s, &[Some(Tensor::scalar(0.5))], &mut st, 0.1, 0.0, 0.0).unwrap();
        assert_eq!(s.get(s.find("w").unwrap()).item(), 1.0 - 0.1 * 0.5);
    }

    #[test]
    fn momentum_two_steps() {
        let (lr, g) = (0.1, 0.5);
        let mut s = one_param(0.0);
        let mut st = OptimizerState::new(&s);
        for _ in 0..2 {
            sgd_step(&mut s, &[Some(Tensor::scalar(g))], &mut st, lr, 0.9, 0.0).unwrap();
        }
        let got = s.get(s.find("w").unwrap()).item();
        assert!((got - (-lr * g * 2.9)).abs() < 1e-15);
    }

    #[test]
    fn decay_only_is_geometric() {
        let (lr, wd) = (0.1, 0.01);
        let mut s = one_param(2.0);
        let mut st = OptimizerState::new(&s);
        sgd_step(&mut s, &[Some(Tensor::scalar(0.0))], &mut st, lr, 0.0, wd).unwrap();
        assert_eq!(s.get(s.find("w").unwrap()).item(), 2.0 * (1.0 - lr * wd));
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let mut s = one_param(1.0);
        let mut st = OptimizerState::new(&s);
        let err = sgd_step(&mut s, &[Some(Tensor::scalar(f64::NAN))], &mut st, 0.1, 0.9, 0.0).unwrap_err();
        assert!(err.to_string().contains('w'));
        assert_eq!(s.get(s.find("w").unwrap()).item(), 1.0);
    }

    #[test]
    fn zero_lr_changes_nothing() {
        let mut s = one_param(1.5);
        let mut st = OptimizerState::new(&s);
        sgd_step(&mut s, &[Some(Tensor::scalar(3.0))], &mut st, 0.0, 0.0, 0.0).unwrap();
        assert_eq!(s.get(s.find("w").unwrap()).item(), 1.5);
    }

    #[test]
    fn config_round_trips_through_toml() {
        let t = TrainConfig {
            stage: Stage::Stage2,
            seed: 42,
            ..TrainConfig::default()
        };
        let text = toml::to_string(&t).unwrap();
        assert_eq!(toml::from_str::<TrainConfig>(&text).unwrap(), t);
        assert!(toml::from_str::<TrainConfig>("learning_rate = 0.1").is_err());
    }
}
