//! Minibatch training with Adam, a plateau learning-rate schedule,
//! validation-driven early stopping and resumable checkpoints.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::FeatureSplit;
use crate::error::{Error, Result};
use crate::eval::evaluate_split;
use crate::model::{load_tensors_raw, save_tensors, MsSl, TensorEntry};
use crate::nn::{named_params, Params, Real};
use crate::objectives::{LossBreakdown, LossConfig, NegativeMode};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    /// Epochs without improvement before the learning rate is multiplied
    /// by `lr_decay`.
    pub lr_patience: usize,
    pub lr_decay: f64,
    pub min_lr: f64,
    /// Fusion weight used for validation SumR.
    pub alpha: f64,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 128,
            lr: 0.00025,
            max_epochs: 100,
            patience: 10,
            lr_patience: 3,
            lr_decay: 0.5,
            min_lr: 1e-6,
            alpha: 0.5,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config("batch size must be >= 2".into()));
        }
        if !(self.lr > 0.0) || !(self.min_lr > 0.0) {
            return Err(Error::Config("learning rates must be > 0".into()));
        }
        if self.patience < 1 || self.lr_patience < 1 {
            return Err(Error::Config("patience must be >= 1".into()));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::Config("lr_decay must be in (0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!(
                "alpha must be in [0, 1], got {}",
                self.alpha
            )));
        }
        if !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
            || !(self.epsilon > 0.0)
        {
            return Err(Error::Config(
                "Adam betas must be in [0, 1) and epsilon > 0".into(),
            ));
        }
        Ok(())
    }
}

/// First and second moment estimates, one tensor per parameter in visit
/// order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Array2<T>>,
    pub v: Vec<Array2<T>>,
    pub step: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new<M: Params<T>>(params: &M) -> Self {
        let zeros: Vec<Array2<T>> = named_params(params)
            .into_iter()
            .map(|(_, t)| Array2::zeros(t.dim()))
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// One bias-corrected Adam update. Nothing is modified when a gradient is
/// non-finite.
pub fn adam_step<T: Real, M: Params<T>>(
    params: &mut M,
    grads: &M,
    state: &mut AdamState<T>,
    lr: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
) -> Result<()> {
    let grads = named_params(grads);
    if grads.len() != state.m.len() {
        return Err(Error::Shape(
            "optimizer state does not match the parameters".into(),
        ));
    }
    for (name, g) in &grads {
        if let Some(i) = g.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: format!("gradient of {name}"),
                index: i,
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    let (b1, b2) = (T::from_f64_lossy(beta1), T::from_f64_lossy(beta2));
    let (one_b1, one_b2) = (
        T::from_f64_lossy(1.0 - beta1),
        T::from_f64_lossy(1.0 - beta2),
    );
    let step_size = T::from_f64_lossy(lr / c1);
    let inv_c2 = T::from_f64_lossy(1.0 / c2);
    let eps = T::from_f64_lossy(epsilon);

    let mut k = 0;
    params.visit_mut("", &mut |_, p| {
        ndarray::Zip::from(p)
            .and(grads[k].1)
            .and(&mut state.m[k])
            .and(&mut state.v[k])
            .for_each(|p, &g, m, v| {
                *m = b1 * *m + one_b1 * g;
                *v = b2 * *v + one_b2 * g * g;
                *p -= step_size * *m / ((*v * inv_c2).sqrt() + eps);
            });
        k += 1;
    });
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum LogRecord {
    Epoch(EpochRecord),
    /// Negative selection changes mode at the start of `epoch`.
    NegativeMode {
        epoch: usize,
        mode: NegativeMode,
    },
    Stop {
        epoch: usize,
        reason: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub negative_mode: NegativeMode,
    /// Mean over pairs of each loss component.
    pub loss: LossBreakdown,
    pub val_sumr: f64,
    pub val_recalls: [f64; 4],
    pub lr: f64,
    pub improved: bool,
    pub elapsed_secs: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<LogRecord>,
}

impl TrainLog {
    pub fn epochs(&self) -> impl Iterator<Item = &EpochRecord> {
        self.records.iter().filter_map(|r| match r {
            LogRecord::Epoch(e) => Some(e),
            _ => None,
        })
    }

    /// The log with wall-clock fields zeroed, for run-to-run comparison.
    pub fn without_timing(&self) -> TrainLog {
        let mut out = self.clone();
        for r in &mut out.records {
            if let LogRecord::Epoch(e) = r {
                e.elapsed_secs = 0.0;
            }
        }
        out
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut s = String::new();
        for r in &self.records {
            s.push_str(&serde_json::to_string(r).map_err(|e| Error::json("train log", e))?);
            s.push('\n');
        }
        Ok(s)
    }

    pub fn read_jsonl(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                serde_json::from_str(l).map_err(|e| Error::json(path.display().to_string(), e))
            })
            .collect::<Result<_>>()?;
        Ok(Self { records })
    }
}

/// Everything needed to continue a run exactly where it stopped.
#[derive(Debug, Clone)]
pub struct TrainerState {
    pub model: MsSl<f32>,
    pub adam: AdamState<f32>,
    pub best: MsSl<f32>,
    pub progress: Progress,
    pub log: TrainLog,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    pub next_epoch: usize,
    pub lr: f64,
    pub best_sumr: f64,
    pub best_epoch: Option<usize>,
    pub since_improvement: usize,
    pub since_lr_change: usize,
    pub stopped: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct StateHeader {
    progress: Progress,
    adam_step: u64,
    m: Vec<TensorEntry>,
    v: Vec<TensorEntry>,
}

impl TrainerState {
    pub fn fresh(model: MsSl<f32>, cfg: &TrainConfig) -> Self {
        Self {
            adam: AdamState::new(&model),
            best: model.clone(),
            model,
            progress: Progress {
                next_epoch: 0,
                lr: cfg.lr,
                best_sumr: f64::NEG_INFINITY,
                best_epoch: None,
                since_improvement: 0,
                since_lr_change: 0,
                stopped: false,
            },
            log: TrainLog::default(),
        }
    }

    /// Writes `best/`, `last/`, `state/` and `train_log.jsonl` under `dir`.
    pub fn save(&self, dir: &Path, meta: &serde_json::Value) -> Result<()> {
        self.best.save(dir.join("best"), meta.clone())?;
        self.model.save(dir.join("last"), meta.clone())?;
        let state_dir = dir.join("state");
        let names: Vec<String> = named_params(&self.model)
            .into_iter()
            .map(|(n, _)| n)
            .collect();
        let m: Vec<_> = names.iter().cloned().zip(&self.adam.m).collect();
        let v: Vec<_> = names.iter().cloned().zip(&self.adam.v).collect();
        let m = save_tensors(&state_dir.join("m"), &m)?;
        let v = save_tensors(&state_dir.join("v"), &v)?;
        let header = StateHeader {
            progress: self.progress,
            adam_step: self.adam.step,
            m,
            v,
        };
        write_json(&state_dir.join("state.json"), &header)?;
        let path = dir.join("train_log.jsonl");
        fs::write(&path, self.log.to_jsonl()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (model, _) = MsSl::<f32>::load(dir.join("last"))?;
        let (best, _) = MsSl::<f32>::load(dir.join("best"))?;
        let state_dir = dir.join("state");
        let path = state_dir.join("state.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let header: StateHeader =
            serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))?;
        let mut adam = AdamState::new(&model);
        adam.step = header.adam_step;
        adam.m = load_moments(&state_dir.join("m"), &header.m, &adam.m)?;
        adam.v = load_moments(&state_dir.join("v"), &header.v, &adam.v)?;
        let log = TrainLog::read_jsonl(dir.join("train_log.jsonl"))?;
        Ok(Self {
            model,
            adam,
            best,
            progress: header.progress,
            log,
        })
    }
}

fn load_moments(
    dir: &Path,
    entries: &[TensorEntry],
    like: &[Array2<f32>],
) -> Result<Vec<Array2<f32>>> {
    if entries.len() != like.len() {
        return Err(Error::Shape(
            "optimizer state does not match the model".into(),
        ));
    }
    entries
        .iter()
        .zip(like)
        .map(|(e, l)| {
            let t = load_tensors_raw(dir, e)?;
            if t.dim() != l.dim() {
                return Err(Error::Shape(format!(
                    "optimizer tensor {} has wrong shape",
                    e.name
                )));
            }
            Ok(t)
        })
        .collect()
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::json(path.display().to_string(), e))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// A seeded RNG stream dedicated to one purpose within one epoch.
fn epoch_rng(seed: u64, epoch: usize, purpose: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(((epoch as u64) << 8) | purpose);
    r
}

/// Shuffled minibatches of query indices. A trailing batch of one pair
/// cannot form negatives and is merged into the batch before it.
pub fn epoch_batches(
    num_pairs: usize,
    batch_size: usize,
    seed: u64,
    epoch: usize,
) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..num_pairs).collect();
    order.shuffle(&mut epoch_rng(seed, epoch, 0));
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() == 1) {
        let last = batches.pop().unwrap();
        batches.last_mut().unwrap().extend(last);
    }
    batches
}

pub struct TrainOutcome {
    pub state: TrainerState,
}

impl TrainOutcome {
    pub fn best(&self) -> &MsSl<f32> {
        &self.state.best
    }

    pub fn log(&self) -> &TrainLog {
        &self.state.log
    }
}

/// Options that do not affect the optimization itself.
#[derive(Debug, Clone, Default)]
pub struct TrainIo {
    /// Directory receiving checkpoints, optimizer state and the log after
    /// every epoch.
    pub out_dir: Option<PathBuf>,
    /// Stored in every checkpoint header.
    pub meta: serde_json::Value,
}

/// Trains until early stopping or `cfg.max_epochs`, continuing from `state`.
pub fn train(
    mut state: TrainerState,
    train: &FeatureSplit,
    val: &FeatureSplit,
    cfg: &TrainConfig,
    loss_cfg: &LossConfig,
    io: &TrainIo,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    loss_cfg.validate()?;
    if train.queries.len() < 2 {
        return Err(Error::Empty(
            "training split needs at least two queries".into(),
        ));
    }
    if val.queries.is_empty() || val.videos.is_empty() {
        return Err(Error::Empty("validation split is empty".into()));
    }
    let mut log_file = match &io.out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join("train_log.jsonl");
            if state.progress.next_epoch == 0 {
                fs::write(&path, "").map_err(|e| Error::io(&path, e))?;
            }
            Some((
                OpenOptions::new()
                    .append(true)
                    .create(true)
                    .open(&path)
                    .map_err(|e| Error::io(&path, e))?,
                path,
            ))
        }
        None => None,
    };
    let mut emit = |state: &mut TrainerState, r: LogRecord| -> Result<()> {
        if let Some((f, path)) = &mut log_file {
            let line = serde_json::to_string(&r).map_err(|e| Error::json("train log", e))?;
            writeln!(f, "{line}").map_err(|e| Error::io(path.as_path(), e))?;
        }
        state.log.records.push(r);
        Ok(())
    };

    let start = Instant::now();
    while !state.progress.stopped && state.progress.next_epoch < cfg.max_epochs {
        let epoch = state.progress.next_epoch;
        let mode = loss_cfg.mode_for_epoch(epoch);
        if epoch == loss_cfg.hard_negative_epoch && epoch > 0 {
            emit(&mut state, LogRecord::NegativeMode { epoch, mode })?;
        }
        let mut neg_rng = epoch_rng(cfg.seed, epoch, 1);
        let mut sums = LossBreakdown::default();
        let batches = epoch_batches(train.queries.len(), cfg.batch_size, cfg.seed, epoch);
        for (b, batch) in batches.iter().enumerate() {
            let queries: Vec<_> = batch.iter().map(|&i| train.queries[i].view()).collect();
            let video_of: Vec<usize> = batch.iter().map(|&i| train.query_video[i]).collect();
            let videos: Vec<_> = video_of.iter().map(|&v| train.videos[v].view()).collect();
            let dropout_seed = (state.model.config.dropout > 0.0)
                .then_some(cfg.seed ^ ((epoch as u64) << 32) ^ b as u64);
            let out = state
                .model
                .batch_loss_and_grad(
                    &queries,
                    &videos,
                    &video_of,
                    loss_cfg,
                    epoch,
                    &mut neg_rng,
                    dropout_seed,
                )
                .map_err(|e| match e {
                    Error::Numeric(m) => Error::Numeric(format!("epoch {epoch}, batch {b}: {m}")),
                    other => other,
                })?;
            adam_step(
                &mut state.model,
                &out.grads,
                &mut state.adam,
                state.progress.lr,
                cfg.beta1,
                cfg.beta2,
                cfg.epsilon,
            )
            .map_err(|e| Error::Numeric(format!("epoch {epoch}, batch {b}: {e}")))?;
            sums.add_scaled(&out.loss, batch.len() as f64);
        }
        let mut mean = LossBreakdown::default();
        mean.add_scaled(&sums, 1.0 / train.queries.len() as f64);

        let report = evaluate_split(&state.model, val, cfg.alpha)?;
        let sumr = report.sum_recall();
        let improved = sumr > state.progress.best_sumr;
        let lr_used = state.progress.lr;
        let p = &mut state.progress;
        if improved {
            p.best_sumr = sumr;
            p.best_epoch = Some(epoch);
            p.since_improvement = 0;
            p.since_lr_change = 0;
        } else {
            p.since_improvement += 1;
            p.since_lr_change += 1;
            if p.since_lr_change >= cfg.lr_patience {
                p.lr = (p.lr * cfg.lr_decay).max(cfg.min_lr);
                p.since_lr_change = 0;
            }
        }
        p.next_epoch = epoch + 1;
        if improved {
            state.best = state.model.clone();
        }
        log::info!(
            "epoch {epoch}: loss {:.4} val SumR {sumr:.1}{}",
            mean.total,
            if improved { " *" } else { "" }
        );
        emit(
            &mut state,
            LogRecord::Epoch(EpochRecord {
                epoch,
                negative_mode: mode,
                loss: mean,
                val_sumr: sumr,
                val_recalls: report.recalls,
                lr: lr_used,
                improved,
                elapsed_secs: start.elapsed().as_secs_f64(),
            }),
        )?;
        if state.progress.since_improvement >= cfg.patience {
            state.progress.stopped = true;
            emit(
                &mut state,
                LogRecord::Stop {
                    epoch,
                    reason: format!("no validation improvement for {} epochs", cfg.patience),
                },
            )?;
        }
        if let Some(dir) = &io.out_dir {
            state.save(dir, &io.meta)?;
        }
    }
    Ok(TrainOutcome { state })
}
