//! Optimizers, the training loop, evaluation and weight snapshots.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{self, Dataset};
use crate::error::{Error, Result};
use crate::model::{build_model, ModelConfig, Param, TinyModel};
use crate::seed;
use crate::tensor::Tensor;

pub const SNAPSHOT_MAGIC: &[u8; 4] = b"MIMW";
pub const SNAPSHOT_VERSION: u32 = 1;
const EVAL_CHUNK: usize = 500;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimKind {
    Adamw,
    Sgd,
}

/// Learning-rate schedule. Unset cosine horizons default to the whole run
/// (`total_steps`) and one epoch (`warmup_steps`).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Schedule {
    Constant,
    Cosine {
        #[serde(default)]
        total_steps: Option<usize>,
        #[serde(default)]
        warmup_steps: Option<usize>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimSpec {
    pub kind: OptimKind,
    pub lr: f64,
    pub betas: [f64; 2],
    pub eps: f64,
    pub momentum: f64,
    /// Decoupled decay, applied to matrices and kernels (rank ≥ 2) only.
    pub weight_decay: f64,
    pub schedule: Schedule,
}

impl Default for OptimSpec {
    fn default() -> Self {
        OptimSpec {
            kind: OptimKind::Adamw,
            lr: 1e-3,
            betas: [0.9, 0.999],
            eps: 1e-8,
            momentum: 0.9,
            weight_decay: 0.05,
            schedule: Schedule::Cosine { total_steps: None, warmup_steps: None },
        }
    }
}

impl OptimSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be finite and >= 0, got {}", self.lr)));
        }
        if self.betas.iter().any(|b| !(0.0..1.0).contains(b)) {
            return Err(Error::Config(format!("betas must lie in [0, 1), got {:?}", self.betas)));
        }
        if !(self.weight_decay >= 0.0) || !(self.eps > 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("weight_decay >= 0, eps > 0 and momentum in [0, 1) required".into()));
        }
        Ok(())
    }

    /// Learning rate at 0-based step `t` of a run of `run_steps` steps with
    /// `steps_per_epoch` steps per epoch.
    pub fn lr_at(&self, t: usize, run_steps: usize, steps_per_epoch: usize) -> f64 {
        match self.schedule {
            Schedule::Constant => self.lr,
            Schedule::Cosine { total_steps, warmup_steps } => {
                let total = total_steps.unwrap_or(run_steps).max(1);
                let warmup = warmup_steps.unwrap_or(steps_per_epoch).min(total - 1);
                if t < warmup {
                    return self.lr * (t + 1) as f64 / warmup as f64;
                }
                let progress = ((t - warmup) as f64 / (total - warmup) as f64).min(1.0);
                0.5 * self.lr * (1.0 + (PI * progress).cos())
            }
        }
    }
}

/// One AdamW update at 1-based step `t`: `p ← p·(1 − lr·wd)`, then the
/// bias-corrected Adam step.
#[allow(clippy::too_many_arguments)]
pub fn adamw_step(
    param: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    lr: f64,
    betas: [f64; 2],
    eps: f64,
    weight_decay: f64,
    t: usize,
) {
    let [b1, b2] = betas;
    let c1 = 1.0 - b1.powi(t as i32);
    let c2 = 1.0 - b2.powi(t as i32);
    let decay = 1.0 - lr * weight_decay;
    for i in 0..param.len() {
        let g = grad[i];
        m[i] = b1 * m[i] + (1.0 - b1) * g;
        v[i] = b2 * v[i] + (1.0 - b2) * g * g;
        let mhat = m[i] / c1;
        let vhat = v[i] / c2;
        param[i] = param[i] * decay - lr * mhat / (vhat.sqrt() + eps);
    }
}

/// Heavy-ball SGD with decoupled weight decay.
pub fn sgd_step(param: &mut [f64], grad: &[f64], buf: &mut [f64], lr: f64, momentum: f64, weight_decay: f64) {
    let decay = 1.0 - lr * weight_decay;
    for i in 0..param.len() {
        buf[i] = momentum * buf[i] + grad[i];
        param[i] = param[i] * decay - lr * buf[i];
    }
}

/// Optimizer state for a parameter registry.
#[derive(Clone, Debug)]
pub struct Optimizer {
    spec: OptimSpec,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    decay: Vec<bool>,
    steps: usize,
}

impl Optimizer {
    pub fn new(spec: &OptimSpec, params: &[Param]) -> Self {
        let zeros = || params.iter().map(|p| vec![0.0; p.value.numel()]).collect::<Vec<_>>();
        Optimizer {
            spec: spec.clone(),
            first: zeros(),
            second: zeros(),
            decay: params.iter().map(|p| p.value.rank() >= 2).collect(),
            steps: 0,
        }
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Applies one update; `grads[i]` of `None` counts as a zero gradient.
    pub fn step<'a>(&mut self, params: impl Iterator<Item = &'a mut Param>, grads: &[Option<Tensor>], lr: f64) {
        self.steps += 1;
        for (i, p) in params.enumerate() {
            let zero;
            let g = match &grads[i] {
                Some(g) => g.data(),
                None => {
                    zero = vec![0.0; p.value.numel()];
                    &zero
                }
            };
            let wd = if self.decay[i] { self.spec.weight_decay } else { 0.0 };
            match self.spec.kind {
                OptimKind::Adamw => adamw_step(
                    p.value.data_mut(),
                    g,
                    &mut self.first[i],
                    &mut self.second[i],
                    lr,
                    self.spec.betas,
                    self.spec.eps,
                    wd,
                    self.steps,
                ),
                OptimKind::Sgd => sgd_step(p.value.data_mut(), g, &mut self.first[i], lr, self.spec.momentum, wd),
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub augment: bool,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions { epochs: 5, batch_size: 128, augment: true }
    }
}

/// Short hex digest identifying a run configuration with the seed removed.
pub fn config_hash(config: &ModelConfig, optim: &OptimSpec, opts: &TrainOptions) -> String {
    let unseeded = ModelConfig { seed: 0, ..config.clone() };
    let canonical = serde_json::json!({ "model": unseeded, "optim": optim, "train": opts });
    let digest = Sha256::digest(canonical.to_string().as_bytes());
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Ok,
    Failed,
}

/// Per-run record, written as one JSON object per run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainResult {
    pub config_hash: String,
    pub seed: u64,
    pub epochs: usize,
    pub status: RunStatus,
    pub failure: Option<String>,
    pub train_loss: Vec<f64>,
    pub train_acc: Vec<f64>,
    pub test_acc: Vec<f64>,
    pub epoch_seconds: Vec<f64>,
    pub final_test_acc: Option<f64>,
    /// Digest of every batch's sample indices and (augmented) pixels.
    pub data_digest: String,
}

impl TrainResult {
    /// Equality ignoring wall-clock timings.
    pub fn same_outcome(&self, other: &TrainResult) -> bool {
        let strip = |r: &TrainResult| TrainResult { epoch_seconds: Vec::new(), ..r.clone() };
        strip(self) == strip(other)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<TrainResult> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

pub struct TrainOutcome {
    pub result: TrainResult,
    /// Final weights; withheld when the run failed.
    pub snapshot: Option<WeightSnapshot>,
}

/// The initial model of a run seeded with `seed`.
pub fn initial_model(config: &ModelConfig, seed: u64) -> Result<TinyModel> {
    build_model(&ModelConfig { seed, ..config.clone() })
}

/// Index of the largest entry, ties to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Fraction of rows of `logits [N, C]` whose argmax equals the label.
pub fn accuracy_from_logits(logits: &Tensor, labels: &[usize]) -> f64 {
    let c = logits.shape()[1];
    let correct = logits.data().chunks(c).zip(labels).filter(|(row, &y)| argmax(row) == y).count();
    correct as f64 / labels.len() as f64
}

pub fn evaluate(model: &TinyModel, dataset: &Dataset) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::Input("cannot evaluate on an empty dataset".into()));
    }
    let mut correct = 0.0;
    let all: Vec<usize> = (0..dataset.len()).collect();
    for chunk in all.chunks(EVAL_CHUNK) {
        let (images, labels) = dataset.gather(chunk);
        correct += accuracy_from_logits(&model.logits(&images)?, &labels) * chunk.len() as f64;
    }
    Ok(correct / dataset.len() as f64)
}

/// Mean cross-entropy of `model` over `dataset`.
pub fn mean_loss(model: &TinyModel, dataset: &Dataset) -> Result<f64> {
    let all: Vec<usize> = (0..dataset.len()).collect();
    let mut total = 0.0;
    for chunk in all.chunks(EVAL_CHUNK) {
        let (images, labels) = dataset.gather(chunk);
        let mut tape = crate::Tape::new();
        let fwd = model.forward(&mut tape, &images, false)?;
        let loss = tape.cross_entropy(fwd.logits, &labels)?;
        total += tape.value(loss).data()[0] * chunk.len() as f64;
    }
    Ok(total / dataset.len() as f64)
}

/// Trains `config` from the seed-`seed` initialization. Init, shuffling and
/// augmentation each draw from their own stream derived from `seed`.
pub fn train(
    config: &ModelConfig,
    train_set: &Dataset,
    test_set: &Dataset,
    optim: &OptimSpec,
    opts: &TrainOptions,
    seed: u64,
) -> Result<TrainOutcome> {
    optim.validate()?;
    if opts.batch_size == 0 {
        return Err(Error::Config("batch_size must be >= 1".into()));
    }
    if train_set.is_empty() {
        return Err(Error::Input("empty training set".into()));
    }
    let mut model = initial_model(config, seed)?;
    let hash = config_hash(config, optim, opts);
    let shuffle_seed = seed::derive_seed(seed, seed::SHUFFLE);
    let mut aug_rng = seed::stream(seed, seed::AUGMENT);
    let mut optimizer = Optimizer::new(optim, model.params());
    let steps_per_epoch = train_set.len().div_ceil(opts.batch_size);
    let run_steps = steps_per_epoch * opts.epochs;
    let mut digest = Sha256::new();

    let mut result = TrainResult {
        config_hash: hash.clone(),
        seed,
        epochs: opts.epochs,
        status: RunStatus::Ok,
        failure: None,
        train_loss: Vec::new(),
        train_acc: Vec::new(),
        test_acc: Vec::new(),
        epoch_seconds: Vec::new(),
        final_test_acc: None,
        data_digest: String::new(),
    };

    'epochs: for epoch in 0..opts.epochs {
        let start = Instant::now();
        let (mut loss_sum, mut correct) = (0.0, 0.0);
        for idx in data::batches(train_set.len(), opts.batch_size, shuffle_seed, epoch)? {
            let (mut images, labels) = train_set.gather(&idx);
            if opts.augment {
                data::augment(&mut images, &mut aug_rng);
            }
            for &i in &idx {
                digest.update((i as u64).to_le_bytes());
            }
            for v in images.data() {
                digest.update(v.to_le_bytes());
            }
            let mut tape = crate::Tape::new();
            let fwd = model.forward(&mut tape, &images, true)?;
            let loss = tape.cross_entropy(fwd.logits, &labels)?;
            let loss_value = tape.value(loss).data()[0];
            if !loss_value.is_finite() {
                result.status = RunStatus::Failed;
                result.failure = Some(format!("non-finite loss at epoch {epoch}, step {}", optimizer.steps()));
                break 'epochs;
            }
            tape.backward(loss)?;
            let grads: Vec<Option<Tensor>> = fwd.params.iter().map(|&p| tape.grad(p)).collect();
            loss_sum += loss_value * idx.len() as f64;
            correct += accuracy_from_logits(tape.value(fwd.logits), &labels) * idx.len() as f64;
            let lr = optim.lr_at(optimizer.steps(), run_steps, steps_per_epoch);
            optimizer.step(model.params_mut(), &grads, lr);
        }
        result.train_loss.push(loss_sum / train_set.len() as f64);
        result.train_acc.push(correct / train_set.len() as f64);
        result.test_acc.push(evaluate(&model, test_set)?);
        result.epoch_seconds.push(start.elapsed().as_secs_f64());
    }
    result.data_digest = digest.finalize()[..16].iter().map(|b| format!("{b:02x}")).collect();

    if result.status == RunStatus::Failed {
        return Ok(TrainOutcome { result, snapshot: None });
    }
    result.final_test_acc = Some(match result.test_acc.last() {
        Some(&a) => a,
        None => evaluate(&model, test_set)?,
    });
    let snapshot = WeightSnapshot::from_model(&model, &hash, seed, opts.epochs as u32);
    Ok(TrainOutcome { result, snapshot: Some(snapshot) })
}

/// Named parameter tensors of one model plus the run metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightSnapshot {
    pub config_hash: String,
    pub seed: u64,
    pub epoch: u32,
    pub tensors: Vec<(String, Tensor)>,
}

impl WeightSnapshot {
    pub fn from_model(model: &TinyModel, config_hash: &str, seed: u64, epoch: u32) -> Self {
        WeightSnapshot {
            config_hash: config_hash.to_string(),
            seed,
            epoch,
            tensors: model.params().iter().map(|p| (p.name.clone(), p.value.clone())).collect(),
        }
    }

    /// Copies every tensor into the same-named parameter of `model`.
    pub fn load_into(&self, model: &mut TinyModel) -> Result<()> {
        for (name, t) in &self.tensors {
            let dst = model.param_mut(name)?;
            if dst.shape() != t.shape() {
                return Err(Error::Shape(format!("'{name}': snapshot {:?} vs model {:?}", t.shape(), dst.shape())));
            }
            *dst = t.clone();
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Layout, all little-endian: `MIMW`, version u32, config hash (u16
    /// length + UTF-8), seed u64, epoch u32, tensor count u32, then per
    /// tensor u16 name length, name, u8 rank, u32 dims, f64 data; finally a
    /// CRC32 of every preceding byte.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(SNAPSHOT_MAGIC);
        out.extend_from_slice(&SNAPSHOT_VERSION.to_le_bytes());
        put_str(&mut out, &self.config_hash)?;
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&self.epoch.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            put_str(&mut out, name)?;
            let rank = u8::try_from(t.rank()).map_err(|_| Error::Input(format!("rank of '{name}' exceeds 255")))?;
            out.push(rank);
            for &d in t.shape() {
                let d = u32::try_from(d).map_err(|_| Error::Input(format!("dimension of '{name}' exceeds u32")))?;
                out.extend_from_slice(&d.to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |reason: String| Error::format(path, reason);
        if bytes.len() < 12 || &bytes[..4] != SNAPSHOT_MAGIC {
            return Err(bad("bad magic".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().unwrap());
        if crc32fast::hash(body) != stored {
            return Err(bad("CRC mismatch".into()));
        }
        let mut r = Reader { buf: &body[4..], path };
        let version = r.u32()?;
        if version != SNAPSHOT_VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let config_hash = r.string()?;
        let seed = r.u64()?;
        let epoch = r.u32()?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name = r.string()?;
            let rank = r.take(1)?[0] as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let raw = r.take(numel.checked_mul(8).ok_or_else(|| bad("tensor too large".into()))?)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            let t = Tensor::new(shape, data).map_err(|e| bad(format!("tensor '{name}': {e}")))?;
            if tensors.iter().any(|(n, _): &(String, Tensor)| *n == name) {
                return Err(bad(format!("duplicate tensor '{name}'")));
            }
            tensors.push((name, t));
        }
        if !r.buf.is_empty() {
            return Err(bad(format!("{} trailing bytes", r.buf.len())));
        }
        Ok(WeightSnapshot { config_hash, seed, epoch, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) -> Result<()> {
    let len = u16::try_from(s.len()).map_err(|_| Error::Input(format!("name too long: {s}")))?;
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() < n {
            return Err(Error::format(self.path, "truncated snapshot"));
        }
        let (head, rest) = self.buf.split_at(n);
        self.buf = rest;
        Ok(head)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let len = u16::from_le_bytes(self.take(2)?.try_into().unwrap()) as usize;
        String::from_utf8(self.take(len)?.to_vec()).map_err(|_| Error::format(self.path, "name is not UTF-8"))
    }
}
