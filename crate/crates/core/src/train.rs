//! Teacher-forced training with AdamW and a linear warmup/decay schedule.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{log_sum_exp, Graph, ParamStore};
use crate::checkpoint;
use crate::data::{make_batches, Batch, EncodedPair};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn::Dropout;
use crate::tensor::{Element, Tensor};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_steps: u64,
    pub warmup_steps: u64,
    pub peak_lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    /// Validate (and checkpoint) every this many steps; 0 disables.
    pub validation_interval: u64,
    /// Stop after this many validations without improvement; 0 disables.
    pub patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            max_steps: 100_000,
            warmup_steps: 5_000,
            peak_lr: 5e-5,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            validation_interval: 1_000,
            patience: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.warmup_steps > self.max_steps {
            return fail(format!(
                "warmup_steps {} exceeds max_steps {}",
                self.warmup_steps, self.max_steps
            ));
        }
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) {
            return fail(format!("peak_lr must be positive, got {}", self.peak_lr));
        }
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return fail("Adam betas must lie in [0, 1)".into());
        }
        if self.weight_decay < 0.0 || self.adam_eps <= 0.0 {
            return fail("weight_decay must be >= 0 and adam_eps > 0".into());
        }
        Ok(())
    }

    pub fn optimizer(&self) -> AdamW {
        AdamW {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }
}

/// Linear ramp from 0 to `peak_lr` over the warmup, then linear decay to
/// 0 at `max_steps`.
pub fn lr_schedule(step: u64, cfg: &TrainConfig) -> f64 {
    if step >= cfg.max_steps {
        return 0.0;
    }
    if step <= cfg.warmup_steps {
        if cfg.warmup_steps == 0 {
            return cfg.peak_lr;
        }
        return cfg.peak_lr * step as f64 / cfg.warmup_steps as f64;
    }
    let remaining = (cfg.max_steps - step) as f64;
    cfg.peak_lr * remaining / (cfg.max_steps - cfg.warmup_steps) as f64
}

/// Mean negative log-likelihood over the targets that are not `pad_id`.
pub fn cross_entropy_loss<T: Element>(logits: &Tensor<T>, targets: &[usize], pad_id: usize) -> Result<f64> {
    let [rows, classes] = logits.shape()[..] else {
        return Err(Error::Input(format!("logits must be [M, V], got {:?}", logits.shape())));
    };
    if rows != targets.len() {
        return Err(Error::Input(format!("{rows} logit rows for {} targets", targets.len())));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for (row, &t) in targets.iter().enumerate() {
        if t == pad_id {
            continue;
        }
        if t >= classes {
            return Err(Error::Input(format!("target {t} is outside {classes} classes")));
        }
        let xs: Vec<f64> = logits.row(row).iter().map(|x| x.as_f64()).collect();
        total += log_sum_exp(&xs) - xs[t];
        count += 1;
    }
    if count == 0 {
        return Err(Error::Input("every target is padding".into()));
    }
    Ok(total / count as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        TrainConfig::default().optimizer()
    }
}

/// First and second moments per parameter plus the update count.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T = f32> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub t: u64,
}

impl<T: Element> OptimizerState<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let zeros: Vec<Vec<T>> = store.iter().map(|(_, p)| vec![T::zero(); p.value().len()]).collect();
        OptimizerState {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }
}

/// One AdamW update with decoupled weight decay. Parameters without a
/// gradient are left untouched.
pub fn adamw_step<T: Element>(
    store: &mut ParamStore<T>,
    state: &mut OptimizerState<T>,
    opt: &AdamW,
    lr: f64,
) -> Result<()> {
    if state.m.len() != store.len() || state.v.len() != store.len() {
        return Err(Error::Input(format!(
            "optimizer tracks {} parameters, store has {}",
            state.m.len(),
            store.len()
        )));
    }
    for (id, p) in store.iter() {
        let n = p.value().len();
        let i = id.index();
        if state.m[i].len() != n || state.v[i].len() != n || p.grad().is_some_and(|g| g.len() != n) {
            return Err(Error::Input(format!("optimizer state shape mismatch for {}", p.name)));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - opt.beta1.powi(t);
    let c2 = 1.0 - opt.beta2.powi(t);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let (m, v) = (&mut state.m[id.index()], &mut state.v[id.index()]);
        store.update(id, |value, grad| {
            let Some(grad) = grad else { return };
            for k in 0..value.len() {
                let g = grad[k].as_f64();
                let mut p = value[k].as_f64();
                p -= lr * opt.weight_decay * p;
                let mk = opt.beta1 * m[k].as_f64() + (1.0 - opt.beta1) * g;
                let vk = opt.beta2 * v[k].as_f64() + (1.0 - opt.beta2) * g * g;
                p -= lr * (mk / c1) / ((vk / c2).sqrt() + opt.eps);
                m[k] = T::from_f64_lossy(mk);
                v[k] = T::from_f64_lossy(vk);
                value[k] = T::from_f64_lossy(p);
            }
        });
    }
    Ok(())
}

/// Everything besides the weights needed to resume training exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainerState {
    /// Completed updates.
    pub step: u64,
    pub best_val_loss: Option<f64>,
    pub evals_since_best: usize,
    pub optimizer: OptimizerState<f32>,
}

impl TrainerState {
    pub fn new(store: &ParamStore<f32>) -> Self {
        TrainerState {
            step: 0,
            best_val_loss: None,
            evals_since_best: 0,
            optimizer: OptimizerState::new(store),
        }
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub step: u64,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub lr: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub steps: u64,
    pub final_train_loss: f64,
    pub best_val_loss: Option<f64>,
    pub stopped_early: bool,
    pub state: TrainerState,
}

/// Whether the loop should keep going after a step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Control {
    Continue,
    Stop,
}

/// Where the loop writes its log and checkpoints.
#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub dir: PathBuf,
}

impl TrainOutput {
    pub fn metrics_path(&self) -> PathBuf {
        self.dir.join(METRICS_FILE)
    }

    pub fn best_path(&self) -> PathBuf {
        self.dir.join(BEST_CHECKPOINT)
    }

    pub fn last_path(&self) -> PathBuf {
        self.dir.join(LAST_CHECKPOINT)
    }
}

fn epoch_seed(seed: u64, epoch: u64) -> u64 {
    seed ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Deterministic batch for a given update index: epochs are reshuffled
/// from `(seed, epoch)`.
struct BatchSchedule<'a> {
    pairs: &'a [EncodedPair],
    batch_size: usize,
    max_len: usize,
    seed: u64,
    epoch: Option<u64>,
    batches: Vec<Batch>,
}

impl<'a> BatchSchedule<'a> {
    fn batch(&mut self, step: u64) -> Result<&Batch> {
        let per_epoch = self.pairs.len().div_ceil(self.batch_size) as u64;
        let epoch = step / per_epoch;
        if self.epoch != Some(epoch) {
            self.batches = make_batches(
                self.pairs,
                self.batch_size,
                self.max_len,
                Some(epoch_seed(self.seed, epoch)),
            )?;
            self.epoch = Some(epoch);
        }
        Ok(&self.batches[(step % per_epoch) as usize])
    }
}

fn step_dropout(p: f64, seed: u64, step: u64) -> Option<Dropout> {
    (p > 0.0).then(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(step + 1);
        Dropout::new(p, rng)
    })
}

/// Forward, backward and gradient collection for one batch. Returns the
/// loss; gradients are left in `model.store`.
pub fn compute_gradients(model: &mut Model<f32>, batch: &Batch, dropout: &mut Option<Dropout>) -> Result<f64> {
    let g = Graph::new();
    let loss = model.loss_graph(&g, &batch.src, &batch.tgt_in, &batch.labels, dropout)?;
    let value = loss.item().as_f64();
    if !value.is_finite() {
        return Err(Error::Data(format!("training loss became {value}")));
    }
    g.backward(loss)?;
    model.store.zero_grad();
    model.store.accumulate_grads(&g);
    Ok(value)
}

/// Token-weighted mean loss over `pairs` without dropout.
pub fn evaluate_loss(model: &Model<f32>, pairs: &[EncodedPair], batch_size: usize) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for batch in make_batches(pairs, batch_size, model.config.max_len, None)? {
        let g = Graph::new();
        let loss = model.loss_graph(&g, &batch.src, &batch.tgt_in, &batch.labels, &mut None)?;
        let n = batch.label_count();
        total += loss.item().as_f64() * n as f64;
        count += n;
    }
    if count == 0 {
        return Err(Error::Data("validation set is empty".into()));
    }
    Ok(total / count as f64)
}

/// Runs training until `max_steps`, early stopping, or the hook asks to
/// stop. Passing `resume` continues from a saved state; with the same data
/// and config the continuation matches an uninterrupted run.
pub fn train_loop(
    model: &mut Model<f32>,
    train: &[EncodedPair],
    valid: &[EncodedPair],
    cfg: &TrainConfig,
    resume: Option<TrainerState>,
    output: Option<&TrainOutput>,
    hook: &mut dyn FnMut(&TrainRecord, &Model<f32>) -> Control,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let mut state = resume.unwrap_or_else(|| TrainerState::new(&model.store));
    let mut log = match output {
        Some(out) => {
            fs::create_dir_all(&out.dir).map_err(|e| Error::io(&out.dir, e))?;
            let path = out.metrics_path();
            let file = OpenOptions::new()
                .create(true)
                .append(state.step > 0)
                .write(true)
                .truncate(state.step == 0)
                .open(&path)
                .map_err(|e| Error::io(&path, e))?;
            Some((BufWriter::new(file), path))
        }
        None => None,
    };
    let opt = cfg.optimizer();
    let mut schedule = BatchSchedule {
        pairs: train,
        batch_size: cfg.batch_size,
        max_len: model.config.max_len,
        seed: cfg.seed,
        epoch: None,
        batches: Vec::new(),
    };
    let started = Instant::now();
    let mut last_loss = f64::NAN;
    let mut stopped_early = false;
    while state.step < cfg.max_steps {
        let step = state.step;
        let lr = lr_schedule(step, cfg);
        let mut dropout = step_dropout(model.config.dropout, cfg.seed, step);
        let batch = schedule.batch(step)?;
        last_loss = compute_gradients(model, batch, &mut dropout)?;
        adamw_step(&mut model.store, &mut state.optimizer, &opt, lr)?;
        model.store.zero_grad();
        state.step += 1;

        let mut val_loss = None;
        let validate = cfg.validation_interval > 0 && state.step.is_multiple_of(cfg.validation_interval);
        if validate && !valid.is_empty() {
            let v = evaluate_loss(model, valid, cfg.batch_size)?;
            val_loss = Some(v);
            if state.best_val_loss.is_none_or(|best| v < best) {
                state.best_val_loss = Some(v);
                state.evals_since_best = 0;
                if let Some(out) = output {
                    checkpoint::save(&out.best_path(), model, None)?;
                }
            } else {
                state.evals_since_best += 1;
            }
        }
        if validate {
            if let Some(out) = output {
                checkpoint::save(&out.last_path(), model, Some(&state))?;
            }
        }
        let record = TrainRecord {
            step: state.step,
            train_loss: last_loss,
            val_loss,
            lr,
            seconds: started.elapsed().as_secs_f64(),
        };
        if let Some((w, path)) = log.as_mut() {
            write_record(w, &record).map_err(|e| Error::io(path.as_path(), e))?;
        }
        let patience_hit = cfg.patience > 0 && state.evals_since_best >= cfg.patience;
        if patience_hit || hook(&record, model) == Control::Stop {
            stopped_early = true;
            break;
        }
    }
    if let Some((mut w, path)) = log {
        w.flush().map_err(|e| Error::io(&path, e))?;
    }
    if let Some(out) = output {
        checkpoint::save(&out.last_path(), model, Some(&state))?;
        if valid.is_empty() || !out.best_path().exists() {
            checkpoint::save(&out.best_path(), model, None)?;
        }
    }
    Ok(TrainOutcome {
        steps: state.step,
        final_train_loss: last_loss,
        best_val_loss: state.best_val_loss,
        stopped_early,
        state,
    })
}

fn write_record(w: &mut BufWriter<File>, record: &TrainRecord) -> std::io::Result<()> {
    serde_json::to_writer(&mut *w, record)?;
    w.write_all(b"\n")
}

/// Reads a metrics log written by [`train_loop`].
pub fn read_metrics(path: &Path) -> Result<Vec<TrainRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}
