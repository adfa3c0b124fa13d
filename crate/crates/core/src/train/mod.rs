//! Optimizer, training loop, evaluation and checkpoints.

mod checkpoint;
mod optim;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use checkpoint::{Checkpoint, CheckpointConfig, PrngState, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use optim::{clip_grad_norm, AdamW, Schedule, StepOutcome};

use crate::autograd::{ParamStore, Tape};
use crate::data::{Dataset, VideoBatch};
use crate::error::{Error, Result};
use crate::loss::{total_loss, LossConfig, LossValues};
use crate::metrics::{MetricAccumulator, MetricReport};
use crate::model::TauModel;
use crate::rng::{child_seed, rng};

const SPLIT_STREAM: u64 = 1;
const SHUFFLE_STREAM: u64 = 2;

pub const RUN_LOG: &str = "run_log.csv";
pub const RUN_LOG_HEADER: &str = "epoch,train_loss,val_mse,val_mae,val_ssim,lr,wall_seconds,skipped_steps,clipped_steps";
pub const NAN_DUMP: &str = "nan_abort.txt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub schedule: Schedule,
    pub warmup_fraction: f64,
    /// Global gradient-norm clip; 0 disables it.
    pub clip_norm: f64,
    /// Seeds initialization, the validation split and per-epoch shuffles.
    pub seed: u64,
    /// Share of the training file held out for validation.
    pub val_fraction: f64,
    /// Per-epoch checkpoints to retain; 0 keeps all.
    pub keep_checkpoints: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            lr: 0.01,
            weight_decay: 0.05,
            epochs: 50,
            schedule: Schedule::Cosine,
            warmup_fraction: 0.05,
            clip_norm: 0.0,
            seed: 0,
            val_fraction: 0.1,
            keep_checkpoints: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(format!("train: {m}")));
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1".into());
        }
        if self.epochs == 0 {
            return fail("epochs must be at least 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.weight_decay >= 0.0 && self.lr * self.weight_decay < 1.0) {
            return fail(format!("weight_decay {} is out of range", self.weight_decay));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return fail(format!("warmup_fraction must be in [0, 1), got {}", self.warmup_fraction));
        }
        if !(self.clip_norm >= 0.0 && self.clip_norm.is_finite()) {
            return fail(format!("clip_norm must be >= 0, got {}", self.clip_norm));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return fail(format!("val_fraction must be in (0, 1), got {}", self.val_fraction));
        }
        Ok(())
    }
}

/// Sorted training and validation indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

/// Seeded hold-out of `round(n · fraction)` sequences (at least one).
pub fn split_indices(n: usize, fraction: f64, seed: u64) -> Result<Split> {
    if n < 2 {
        return Err(Error::Config(format!("need at least 2 sequences to hold out validation, have {n}")));
    }
    let k = ((n as f64 * fraction).round() as usize).clamp(1, n - 1);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng(child_seed(seed, SPLIT_STREAM)));
    let mut val = idx[..k].to_vec();
    let mut train = idx[k..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    Ok(Split { train, val })
}

/// One row of the run log.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_mse: f64,
    pub val_mae: f64,
    pub val_ssim: f64,
    /// Rate used on the epoch's last step.
    pub lr: f64,
    pub wall_seconds: f64,
    pub skipped_steps: usize,
    pub clipped_steps: usize,
}

impl EpochRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{:.3},{},{}",
            self.epoch,
            self.train_loss,
            self.val_mse,
            self.val_mae,
            self.val_ssim,
            self.lr,
            self.wall_seconds,
            self.skipped_steps,
            self.clipped_steps
        )
    }
}

/// Result of one optimizer step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub loss: LossValues,
    pub outcome: StepOutcome,
    /// Pre-clip gradient norm when clipping fired.
    pub clipped_from: Option<f64>,
}

/// Owns parameters and optimizer state for one run.
pub struct Trainer<'m> {
    model: &'m TauModel,
    config: CheckpointConfig,
    params: ParamStore,
    optim: AdamW,
    epoch: usize,
    best_val_mse: f64,
}

impl<'m> Trainer<'m> {
    /// Fresh run with parameters drawn from `train.seed`.
    pub fn new(model: &'m TauModel, train: TrainConfig, loss: LossConfig) -> Result<Self> {
        let params = model.init_params(train.seed);
        Self::with_params(model, params, train, loss)
    }

    pub fn with_params(model: &'m TauModel, params: ParamStore, train: TrainConfig, loss: LossConfig) -> Result<Self> {
        train.validate()?;
        loss.validate()?;
        model.check_params(&params)?;
        let optim = AdamW::new(&params, train.weight_decay);
        Ok(Self {
            model,
            config: CheckpointConfig {
                model: model.config().clone(),
                train,
                loss,
            },
            params,
            optim,
            epoch: 0,
            best_val_mse: f64::INFINITY,
        })
    }

    /// Continue from a checkpoint. `epochs` may raise the epoch budget.
    pub fn resume(model: &'m TauModel, ckpt: Checkpoint, epochs: Option<usize>) -> Result<Self> {
        if &ckpt.config.model != model.config() {
            return Err(Error::Checkpoint(
                "checkpoint model configuration differs from the requested model".into(),
            ));
        }
        model.check_params(&ckpt.params)?;
        ckpt.optim.check_params(&ckpt.params)?;
        let mut config = ckpt.config;
        if let Some(e) = epochs {
            config.train.epochs = e;
        }
        if ckpt.prng.seed != config.train.seed || ckpt.prng.next_epoch != ckpt.epoch as u64 {
            return Err(Error::Checkpoint("PRNG state disagrees with the stored seed and epoch".into()));
        }
        Ok(Self {
            model,
            config,
            params: ckpt.params,
            optim: ckpt.optim,
            epoch: ckpt.epoch,
            best_val_mse: ckpt.best_val_mse,
        })
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn config(&self) -> &CheckpointConfig {
        &self.config
    }

    /// Completed epochs.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            params: self.params.clone(),
            optim: self.optim.clone(),
            prng: PrngState {
                seed: self.config.train.seed,
                next_epoch: self.epoch as u64,
            },
            epoch: self.epoch,
            best_val_mse: self.best_val_mse,
        }
    }

    /// Forward, loss, backward, optional clip, AdamW, zero-grad.
    /// A non-finite loss returns `Ok` with the values and leaves parameters
    /// untouched; the caller decides whether to abort.
    pub fn train_step(&mut self, batch: &VideoBatch, lr: f64) -> Result<StepReport> {
        let mut tape = Tape::new();
        let x = tape.input(batch.input.clone());
        let y = tape.input(batch.target.clone());
        let y_hat = self.model.forward(&mut tape, &self.params, x)?;
        let skipped = |loss| StepReport {
            loss,
            outcome: StepOutcome::SkippedNonFinite,
            clipped_from: None,
        };
        let terms = match total_loss(&mut tape, y_hat, y, &self.config.loss) {
            Err(Error::NonFinite(_)) => {
                return Ok(skipped(LossValues {
                    total: f64::NAN,
                    reconstruction: f64::NAN,
                    ddr: None,
                }))
            }
            other => other?,
        };
        let loss = terms.values(&tape);
        if !loss.total.is_finite() {
            return Ok(skipped(loss));
        }
        tape.backward(terms.total, &mut self.params)?;
        let clip = self.config.train.clip_norm;
        let clipped_from = if clip > 0.0 {
            clip_grad_norm(&mut self.params, clip)
        } else {
            None
        };
        let outcome = self.optim.step(&mut self.params, lr)?;
        self.params.zero_grad();
        Ok(StepReport {
            loss,
            outcome,
            clipped_from,
        })
    }

    /// Train until the configured epoch count. With `out`, writes the run log,
    /// per-epoch checkpoints under `out/checkpoints` and `best.ckpt`.
    pub fn run(&mut self, data: &Dataset, out: Option<&Path>) -> Result<Vec<EpochRecord>> {
        let mc = self.model.config();
        data.check_compatible(mc.frames_in, mc.frames_out, mc.in_channels)?;
        let tc = self.config.train.clone();
        let split = split_indices(data.len(), tc.val_fraction, tc.seed)?;
        let per_epoch = split.train.len().div_ceil(tc.batch_size);
        let total_steps = per_epoch * tc.epochs;

        let ckpt_dir = out.map(|o| o.join("checkpoints"));
        if let Some(dir) = &ckpt_dir {
            fs::create_dir_all(dir)?;
            prepare_log(&out.unwrap().join(RUN_LOG), self.epoch)?;
        }

        let mut records = Vec::new();
        while self.epoch < tc.epochs {
            let start = Instant::now();
            let mut order = split.train.clone();
            order.shuffle(&mut rng(child_seed(child_seed(tc.seed, SHUFFLE_STREAM), self.epoch as u64)));
            let (mut loss_sum, mut seen, mut skipped, mut clipped) = (0.0, 0usize, 0usize, 0usize);
            let mut lr = tc.lr;
            for (b, chunk) in order.chunks(tc.batch_size).enumerate() {
                lr = tc.schedule.lr_at(tc.lr, tc.warmup_fraction, self.epoch * per_epoch + b, total_steps);
                let batch = data.batch(chunk, mc.frames_in, mc.frames_out)?;
                let step = self.train_step(&batch, lr)?;
                if !step.loss.total.is_finite() {
                    if let Some(o) = out {
                        dump_nan(&o.join(NAN_DUMP), self.epoch + 1, b, chunk, &step.loss, lr)?;
                    }
                    return Err(Error::NonFiniteLoss {
                        epoch: self.epoch + 1,
                        batch: b,
                        sequences: chunk.to_vec(),
                    });
                }
                if step.outcome == StepOutcome::SkippedNonFinite {
                    log::warn!("epoch {} batch {b}: non-finite gradient, step skipped", self.epoch + 1);
                    skipped += 1;
                }
                if let Some(n) = step.clipped_from {
                    log::info!("epoch {} batch {b}: gradient norm {n:.4e} clipped", self.epoch + 1);
                    clipped += 1;
                }
                loss_sum += step.loss.total * chunk.len() as f64;
                seen += chunk.len();
            }
            let val = evaluate(self.model, &self.params, data, &split.val, tc.batch_size, mc.frames_out)?;
            self.epoch += 1;
            let rec = EpochRecord {
                epoch: self.epoch,
                train_loss: loss_sum / seen as f64,
                val_mse: val.mean.mse,
                val_mae: val.mean.mae,
                val_ssim: val.mean.ssim,
                lr,
                wall_seconds: start.elapsed().as_secs_f64(),
                skipped_steps: skipped,
                clipped_steps: clipped,
            };
            let improved = rec.val_mse < self.best_val_mse;
            if improved {
                self.best_val_mse = rec.val_mse;
            }
            log::info!(
                "epoch {}/{}: train loss {:.6}, val mse {:.4}, val ssim {:.4}, lr {:.2e}, {:.1}s",
                rec.epoch,
                tc.epochs,
                rec.train_loss,
                rec.val_mse,
                rec.val_ssim,
                rec.lr,
                rec.wall_seconds
            );
            if let (Some(o), Some(dir)) = (out, &ckpt_dir) {
                let ckpt = self.checkpoint();
                ckpt.save(dir.join(epoch_file(self.epoch)))?;
                if improved {
                    ckpt.save(dir.join(BEST_CHECKPOINT))?;
                }
                if tc.keep_checkpoints > 0 && self.epoch > tc.keep_checkpoints {
                    let old = dir.join(epoch_file(self.epoch - tc.keep_checkpoints));
                    if old.exists() {
                        fs::remove_file(old)?;
                    }
                }
                let mut f = fs::OpenOptions::new().append(true).open(o.join(RUN_LOG))?;
                std::io::Write::write_all(&mut f, format!("{}\n", rec.csv_row()).as_bytes())?;
            }
            records.push(rec);
        }
        Ok(records)
    }
}

pub fn epoch_file(epoch: usize) -> String {
    format!("epoch-{epoch:04}.ckpt")
}

/// Newest `epoch-NNNN.ckpt` in `dir`.
pub fn latest_checkpoint(dir: impl AsRef<Path>) -> Result<Option<PathBuf>> {
    let mut best: Option<(usize, PathBuf)> = None;
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
        let Some(n) = name
            .strip_prefix("epoch-")
            .and_then(|s| s.strip_suffix(".ckpt"))
            .and_then(|s| s.parse::<usize>().ok())
        else {
            continue;
        };
        if best.as_ref().is_none_or(|(b, _)| n > *b) {
            best = Some((n, path));
        }
    }
    Ok(best.map(|(_, p)| p))
}

/// Create the log with its header, or on resume keep only rows up to
/// `completed` epochs.
fn prepare_log(path: &Path, completed: usize) -> Result<()> {
    let mut text = format!("{RUN_LOG_HEADER}\n");
    if completed > 0 && path.exists() {
        for line in fs::read_to_string(path)?.lines().skip(1) {
            let epoch = line.split(',').next().and_then(|e| e.parse::<usize>().ok());
            if epoch.is_some_and(|e| e <= completed) {
                text.push_str(line);
                text.push('\n');
            }
        }
    }
    fs::write(path, text)?;
    Ok(())
}

fn dump_nan(path: &Path, epoch: usize, batch: usize, seqs: &[usize], loss: &LossValues, lr: f64) -> Result<()> {
    let mut s = String::new();
    let _ = writeln!(s, "epoch = {epoch}");
    let _ = writeln!(s, "batch = {batch}");
    let _ = writeln!(s, "sequences = {seqs:?}");
    let _ = writeln!(s, "lr = {lr}");
    let _ = writeln!(s, "total = {}", loss.total);
    let _ = writeln!(s, "reconstruction = {}", loss.reconstruction);
    let _ = writeln!(s, "ddr = {:?}", loss.ddr);
    fs::write(path, s)?;
    Ok(())
}

/// Metrics over sequences `indices` of `data` for a `horizon`-frame
/// prediction. Horizons past the model's output length roll out
/// recursively. Predictions are clamped to `[0, 1]`.
pub fn evaluate(
    model: &TauModel,
    params: &ParamStore,
    data: &Dataset,
    indices: &[usize],
    batch_size: usize,
    horizon: usize,
) -> Result<MetricReport> {
    let mc = model.config();
    data.check_compatible(mc.frames_in, horizon, mc.in_channels)?;
    if indices.is_empty() || batch_size == 0 {
        return Err(Error::Config("evaluation needs at least one sequence and batch size".into()));
    }
    let mut acc = MetricAccumulator::new(horizon);
    for chunk in indices.chunks(batch_size) {
        let batch = data.batch(chunk, mc.frames_in, horizon)?;
        let (pred, _) = predict_horizon(model, params, &batch.input, horizon)?;
        acc.add(&pred, &batch.target)?;
    }
    Ok(acc.finish())
}

/// Clamped prediction of `horizon` frames and the number of forward calls.
pub fn predict_horizon(
    model: &TauModel,
    params: &ParamStore,
    input: &crate::Tensor,
    horizon: usize,
) -> Result<(crate::Tensor, usize)> {
    if horizon == model.config().frames_out {
        Ok((model.predict(params, input)?.clamp(0.0, 1.0), 1))
    } else {
        model.predict_recursive(params, input, horizon)
    }
}
