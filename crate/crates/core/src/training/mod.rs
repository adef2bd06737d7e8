//! Detector fitting with binary cross-entropy and Adam, resumable runs,
//! and pose-encoder pretraining.

mod loss;
mod pose;
mod runlog;
mod warmup;

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use loss::{bce_logit_grad, bce_loss, cross_entropy, PROB_EPS};
pub use pose::{pose_samples, pretrain_pose, PoseEpoch, PoseReport, PoseSample, PoseTrainConfig};
pub use runlog::{EpochRecord, RunLog};

use crate::artifact::config_hash;
use crate::error::{Error, Result};
use crate::evaluation::{EvalRow, DEFAULT_THRESHOLD};
use crate::geometry::ViewParams;
use crate::ingestion::{Label, Sample, SyntheticSpec};
use crate::model::{Archive, DetectorModel, Entry, EntryKind, ModelConfig, PoseInput, PreparedBatch};
use crate::nn::{apply_updates, Adam, AdamConfig, Mode, Session, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum LrSchedule {
    /// Multiply the rate by `gamma` every `every` epochs.
    Step { every: usize, gamma: f64 },
    /// Half-cosine decay from the base rate to `min_lr` over the run.
    Cosine { min_lr: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EarlyStopping {
    /// Epochs without a validation-F1 gain before stopping.
    pub patience: usize,
    #[serde(default)]
    pub min_delta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub adam: AdamConfig,
    #[serde(default = "yes")]
    pub freeze_pose: bool,
    /// Also keep a full training-state checkpoint every this many epochs
    /// (0 keeps only `last.ckpt` and `best.ckpt`).
    #[serde(default)]
    pub checkpoint_every: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lr_schedule: Option<LrSchedule>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub early_stopping: Option<EarlyStopping>,
    /// Epochs of single-view training per encoder before joint training.
    #[serde(default)]
    pub per_view_warmup_epochs: usize,
    /// Pose pretraining run before fitting, when present.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pose_pretrain: Option<PoseTrainConfig>,
}

fn default_epochs() -> usize {
    100
}
fn default_lr() -> f64 {
    1e-4
}
fn default_batch() -> usize {
    16
}
fn yes() -> bool {
    true
}

impl Default for TrainConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults deserialize")
    }
}

impl TrainConfig {
    /// A zero learning rate is accepted; it yields a run that only
    /// evaluates.
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::Config(format!("learning rate {} is invalid", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if let Some(LrSchedule::Step { every: 0, .. }) = self.lr_schedule {
            return Err(Error::Config("step schedule needs `every` ≥ 1".into()));
        }
        if let Some(p) = &self.pose_pretrain {
            p.validate()?;
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let base = self.learning_rate;
        match self.lr_schedule {
            None => base,
            Some(LrSchedule::Step { every, gamma }) => base * gamma.powi(((epoch - 1) / every) as i32),
            Some(LrSchedule::Cosine { min_lr }) => {
                let t = (epoch - 1) as f64 / self.epochs as f64;
                min_lr + 0.5 * (base - min_lr) * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

/// Digest identifying a run: the model and training configurations.
pub fn run_hash(model: &ModelConfig, train: &TrainConfig) -> Result<String> {
    config_hash(&serde_json::json!({ "model": model, "train": train }))
}

/// Mixes a root seed with coordinates (epoch, batch, ...) into a new seed.
pub fn derive_seed(root: u64, parts: &[u64]) -> u64 {
    let mut h = root ^ 0x9E37_79B9_7F4A_7C15;
    for &p in parts {
        h = splitmix(h ^ splitmix(p.wrapping_add(0x632B_E59B_D9B4_E019)));
    }
    splitmix(h)
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A sample converted to network inputs once, up front.
#[derive(Clone, Debug)]
pub struct Example {
    pub batch: PreparedBatch,
    pub label: f64,
}

/// Prepares every sample. With a frozen pose encoder its logits are
/// computed here once instead of on every step.
pub fn prepare_examples(model: &DetectorModel, samples: &[Sample]) -> Result<Vec<Example>> {
    let cache_pose = model.uses_pose() && model.pose_frozen();
    samples
        .par_iter()
        .map(|s| {
            let mut batch = model.prepare(&[&s.views], model.uses_pose())?;
            if cache_pose {
                if let PoseInput::Image(x) = &batch.pose {
                    batch.pose = PoseInput::Logits(model.pose_logits(x)?);
                }
            }
            Ok(Example {
                batch,
                label: s.label.as_f64(),
            })
        })
        .collect()
}

fn stack(examples: &[&Example]) -> (PreparedBatch, Vec<f64>) {
    let batch = PreparedBatch::concat(&examples.iter().map(|e| &e.batch).collect::<Vec<_>>());
    (batch, examples.iter().map(|e| e.label).collect())
}

/// Batch boundaries over `n` items; a trailing single item joins the
/// previous batch so batch-norm never sees a batch of one.
fn batch_ranges(n: usize, size: usize) -> Vec<(usize, usize)> {
    let mut out: Vec<(usize, usize)> = (0..n).step_by(size).map(|s| (s, (s + size).min(n))).collect();
    if out.len() > 1 && out.last().is_some_and(|(s, e)| e - s == 1) {
        let (_, end) = out.pop().expect("non-empty");
        out.last_mut().expect("at least one").1 = end;
    }
    out
}

fn at_batch(e: Error, b: usize) -> Error {
    match e {
        Error::NumericFault { layer, .. } => Error::NumericFault { layer, batch: Some(b) },
        other => other,
    }
}

/// One optimizer step on a batch; returns the loss and the probabilities.
pub fn train_step(
    model: &mut DetectorModel,
    adam: &mut Adam,
    batch: &PreparedBatch,
    labels: &[f64],
    lr: f64,
    seed: u64,
) -> Result<(f64, Vec<f64>)> {
    let (loss, probs, grads, updates) = {
        let mut s = Session::new(&model.store, Mode::Train, seed);
        let out = model.forward_session(&mut s, batch)?;
        let probs = s.graph.value(out.prob).data().to_vec();
        let loss = bce_loss(&probs, labels)?;
        if !loss.is_finite() {
            return Err(Error::NumericFault {
                layer: "loss".into(),
                batch: None,
            });
        }
        let g = s.graph.backward(out.logit, bce_logit_grad(&probs, labels)?);
        (loss, probs, s.param_grads(&g), s.take_updates())
    };
    if let Some((id, _)) = grads.iter().find(|(_, g)| !g.is_finite()) {
        return Err(Error::NumericFault {
            layer: format!("gradient of {}", model.store.entry(*id).name),
            batch: None,
        });
    }
    adam.step(&mut model.store, lr, &grads);
    apply_updates(&mut model.store, updates);
    Ok((loss, probs))
}

/// Eval-mode probabilities for prepared examples.
pub fn predict_examples(model: &DetectorModel, examples: &[Example]) -> Result<Vec<f64>> {
    let parts: Vec<Vec<f64>> = examples
        .par_chunks(32)
        .map(|chunk| {
            let (batch, _) = stack(&chunk.iter().collect::<Vec<_>>());
            Ok(model.forward_prepared(&batch)?.probs)
        })
        .collect::<Result<_>>()?;
    Ok(parts.concat())
}

fn labels_of(examples: &[Example]) -> Vec<Label> {
    examples
        .iter()
        .map(|e| if e.label > 0.5 { Label::Fake } else { Label::Real })
        .collect()
}

/// Loss and metric row for prepared examples.
pub fn evaluate_examples(model: &DetectorModel, examples: &[Example], split: &str) -> Result<(f64, EvalRow)> {
    let probs = predict_examples(model, examples)?;
    let ys: Vec<f64> = examples.iter().map(|e| e.label).collect();
    let loss = bce_loss(&probs, &ys)?;
    let row = EvalRow::from_scores("", split, &probs, &labels_of(examples), DEFAULT_THRESHOLD)?;
    Ok((loss, row))
}

#[derive(Clone, Debug)]
pub struct FitReport {
    pub log: RunLog,
    pub best_epoch: usize,
    pub best_val_f1: f64,
    pub stopped_early: bool,
    pub run_dir: Option<PathBuf>,
    /// Pose pretraining done by [`fit`] before the first epoch.
    pub pose: Option<PoseReport>,
}

pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const RUN_LOG: &str = "run_log.jsonl";

const ADAM_PREFIX: &str = "adam/";
const BEST_PREFIX: &str = "best/";

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TrainState {
    epoch: usize,
    adam_steps: u64,
    run_hash: String,
    best_epoch: usize,
    best_val_f1: f64,
    stale_epochs: usize,
    log: RunLog,
}

struct Loop {
    adam: Adam,
    state: TrainState,
    /// Parameters at the best epoch.
    best_params: Option<Vec<Tensor>>,
}

impl Loop {
    fn archive(&self, model: &DetectorModel) -> Result<Archive> {
        let mut extra: Vec<Entry> = self
            .adam
            .export(&model.store)
            .into_iter()
            .map(|(name, tensor)| Entry {
                name: format!("{ADAM_PREFIX}{name}"),
                kind: EntryKind::State,
                tensor,
            })
            .collect();
        // Best parameters equal the current ones unless the run has moved on.
        if let Some(best) = self.best_params.as_ref().filter(|_| self.state.best_epoch != self.state.epoch) {
            for (e, t) in model.store.entries().iter().zip(best) {
                extra.push(Entry {
                    name: format!("{BEST_PREFIX}{}", e.name),
                    kind: EntryKind::State,
                    tensor: t.clone(),
                });
            }
        }
        model.to_archive(serde_json::json!({ "train": self.state }), extra)
    }

    fn restore(archive: &Archive, model: &DetectorModel, adam: AdamConfig) -> Result<Self> {
        let state: TrainState = archive
            .header
            .get("extra")
            .and_then(|e| e.get("train"))
            .cloned()
            .ok_or_else(|| Error::CorruptCheckpoint("checkpoint holds no training state".into()))
            .and_then(|v| serde_json::from_value(v).map_err(|e| Error::CorruptCheckpoint(format!("training state: {e}"))))?;
        let moments: Vec<(String, Tensor)> = archive
            .entries
            .iter()
            .filter_map(|e| Some((e.name.strip_prefix(ADAM_PREFIX)?.to_string(), e.tensor.clone())))
            .collect();
        let best: Vec<Tensor> = model
            .store
            .entries()
            .iter()
            .filter_map(|p| archive.get(&format!("{BEST_PREFIX}{}", p.name)).map(|e| e.tensor.clone()))
            .collect();
        let best_params = if best.len() == model.store.len() {
            Some(best)
        } else if state.best_epoch == state.epoch && state.epoch > 0 {
            Some(snapshot(model))
        } else {
            None
        };
        Ok(Loop {
            adam: Adam::import(adam, state.adam_steps, &model.store, &moments),
            state,
            best_params,
        })
    }
}

fn snapshot(model: &DetectorModel) -> Vec<Tensor> {
    model.store.entries().iter().map(|e| e.value.clone()).collect()
}

fn restore_params(model: &mut DetectorModel, params: Vec<Tensor>) {
    let ids: Vec<_> = model.store.ids().collect();
    for (id, t) in ids.into_iter().zip(params) {
        *model.store.get_mut(id) = t;
    }
}

/// Trains `model` on `train`, selecting the epoch with the best
/// validation F1. On return the model holds the best parameters.
///
/// With `run_dir`, the run log, the latest and best checkpoints, and any
/// periodic checkpoints are written there as the run progresses.
pub fn fit(
    model: &mut DetectorModel,
    train: &[Sample],
    val: &[Sample],
    config: &TrainConfig,
    run_dir: Option<&Path>,
) -> Result<FitReport> {
    config.validate()?;
    let mut pose = None;
    if let (Some(pc), true) = (&config.pose_pretrain, model.uses_pose()) {
        let data = pose_samples(pc.per_class, SyntheticSpec::new(2, 0).side, pc.seed, &ViewParams::default())?;
        let report = pretrain_pose(model, &data, pc)?;
        log::info!("pose pretraining: accuracy {:.4}", report.final_accuracy);
        pose = Some(report);
    }
    model.set_pose_frozen(config.freeze_pose);
    let state = TrainState {
        epoch: 0,
        adam_steps: 0,
        run_hash: run_hash(model.config(), config)?,
        best_epoch: 0,
        best_val_f1: f64::NEG_INFINITY,
        stale_epochs: 0,
        log: RunLog::default(),
    };
    let lp = Loop {
        adam: Adam::new(config.adam),
        state,
        best_params: None,
    };
    let mut report = run(model, lp, train, val, config, run_dir)?;
    report.pose = pose;
    Ok(report)
}

/// Continues the run saved in `checkpoint`. The configuration must match
/// the one that wrote it.
pub fn resume(
    checkpoint: &Path,
    train: &[Sample],
    val: &[Sample],
    config: &TrainConfig,
    run_dir: Option<&Path>,
) -> Result<(DetectorModel, FitReport)> {
    config.validate()?;
    let archive = Archive::load(checkpoint)?;
    let mut model = DetectorModel::from_archive(&archive)?;
    let lp = Loop::restore(&archive, &model, config.adam)?;
    let expected = run_hash(model.config(), config)?;
    if lp.state.run_hash != expected {
        return Err(Error::Config(format!(
            "{} was written by run {} but the current configuration hashes to {expected}",
            checkpoint.display(),
            lp.state.run_hash
        )));
    }
    model.set_pose_frozen(config.freeze_pose);
    let report = run(&mut model, lp, train, val, config, run_dir)?;
    Ok((model, report))
}

fn run(
    model: &mut DetectorModel,
    mut lp: Loop,
    train: &[Sample],
    val: &[Sample],
    config: &TrainConfig,
    run_dir: Option<&Path>,
) -> Result<FitReport> {
    if train.len() < 2 {
        return Err(Error::EmptySplit("train".into()));
    }
    if val.is_empty() {
        return Err(Error::EmptySplit("val".into()));
    }
    let train_ex = prepare_examples(model, train)?;
    let val_ex = prepare_examples(model, val)?;
    if lp.state.epoch == 0 && config.per_view_warmup_epochs > 0 {
        warmup::warm_up_views(model, &train_ex, config)?;
    }
    let mut stopped_early = false;
    for epoch in lp.state.epoch + 1..=config.epochs {
        let started = Instant::now();
        let lr = config.lr_at(epoch);
        let mut order: Vec<usize> = (0..train_ex.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[epoch as u64])));
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for (b, (s, e)) in batch_ranges(order.len(), config.batch_size).into_iter().enumerate() {
            let picked: Vec<&Example> = order[s..e].iter().map(|&i| &train_ex[i]).collect();
            let (batch, labels) = stack(&picked);
            let seed = derive_seed(config.seed, &[epoch as u64, b as u64]);
            let (loss, probs) =
                train_step(model, &mut lp.adam, &batch, &labels, lr, seed).map_err(|e| at_batch(e, b))?;
            loss_sum += loss * labels.len() as f64;
            correct += probs
                .iter()
                .zip(&labels)
                .filter(|(p, y)| (**p >= DEFAULT_THRESHOLD) == (**y > 0.5))
                .count();
        }
        let (val_loss, row) = evaluate_examples(model, &val_ex, "val")?;
        let st = &mut lp.state;
        st.epoch = epoch;
        st.adam_steps = lp.adam.steps();
        let min_delta = config.early_stopping.map_or(0.0, |e| e.min_delta);
        let improved = row.f1 > st.best_val_f1 + min_delta || st.best_epoch == 0;
        if improved {
            st.best_epoch = epoch;
            st.best_val_f1 = row.f1;
            st.stale_epochs = 0;
            lp.best_params = Some(snapshot(model));
        } else {
            st.stale_epochs += 1;
        }
        st.log.push(EpochRecord {
            epoch,
            lr,
            train_loss: loss_sum / train_ex.len() as f64,
            train_accuracy: correct as f64 / train_ex.len() as f64,
            val_loss,
            val_precision: row.precision,
            val_recall: row.recall,
            val_f1: row.f1,
            val_auc: row.auc,
            best_epoch: st.best_epoch,
            config_hash: st.run_hash.clone(),
            wall_clock_s: started.elapsed().as_secs_f64(),
        });
        log::info!(
            "epoch {epoch}/{}: train loss {:.4}, val loss {val_loss:.4}, val F1 {:.4}",
            config.epochs,
            loss_sum / train_ex.len() as f64,
            row.f1
        );
        if let Some(dir) = run_dir {
            let archive = lp.archive(model)?;
            if improved {
                model
                    .to_archive(serde_json::json!({ "epoch": epoch, "val_f1": row.f1 }), Vec::new())?
                    .save(&dir.join(BEST_CHECKPOINT))?;
            }
            if config.checkpoint_every > 0 && epoch % config.checkpoint_every == 0 {
                archive.save(&dir.join(format!("epoch_{epoch:04}.ckpt")))?;
            }
            archive.save(&dir.join(LAST_CHECKPOINT))?;
            lp.state.log.save(&dir.join(RUN_LOG))?;
        }
        if let Some(es) = config.early_stopping {
            if lp.state.stale_epochs >= es.patience.max(1) {
                stopped_early = true;
                break;
            }
        }
    }
    if lp.state.best_epoch != lp.state.epoch {
        if let Some(p) = lp.best_params.take() {
            restore_params(model, p);
        }
    }
    Ok(FitReport {
        log: lp.state.log,
        best_epoch: lp.state.best_epoch,
        best_val_f1: lp.state.best_val_f1,
        stopped_early,
        run_dir: run_dir.map(Path::to_path_buf),
        pose: None,
    })
}
