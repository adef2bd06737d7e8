use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{batch_ranges, cross_entropy, derive_seed};
use crate::error::{Error, Result};
use crate::geometry::{extract_views, ImageBuffer, ViewParams};
use crate::ingestion::synth::render_pose_set;
use crate::model::{argmax, DetectorModel, POSE_CLASSES};
use crate::nn::{apply_updates, softmax_rows, Adam, AdamConfig, Mode, Session, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseTrainConfig {
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
    /// Synthetic images per class when the set is generated.
    #[serde(default = "default_per_class")]
    pub per_class: usize,
}

fn default_epochs() -> usize {
    30
}
fn default_lr() -> f64 {
    1e-3
}
fn default_batch() -> usize {
    32
}
fn default_per_class() -> usize {
    20
}

impl Default for PoseTrainConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults deserialize")
    }
}

impl PoseTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.per_class == 0 {
            return Err(Error::Config("pose pretraining needs epochs, batch size and per-class count ≥ 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::Config(format!("pose learning rate {} is invalid", self.learning_rate)));
        }
        Ok(())
    }
}

/// A middle view with its pose class.
#[derive(Clone, Debug)]
pub struct PoseSample {
    pub middle: ImageBuffer,
    pub class: u8,
}

/// The synthetic pose set: `per_class` artifact-free faces of each class,
/// reduced to their middle views.
pub fn pose_samples(per_class: usize, side: usize, seed: u64, params: &ViewParams) -> Result<Vec<PoseSample>> {
    render_pose_set(per_class, side, seed)
        .into_par_iter()
        .map(|item| {
            Ok(PoseSample {
                middle: extract_views(&item.image, &item.face, params)?.middle.image,
                class: item.pose_class,
            })
        })
        .collect()
}

/// Evaluation of the pose branch over the whole set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseEpoch {
    /// 0 is the state before any update.
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
    /// Largest deviation of a softmax row sum from 1.
    pub max_softmax_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseReport {
    pub epochs: Vec<PoseEpoch>,
    pub final_accuracy: f64,
    /// Parameter checksum after training.
    pub checksum: String,
}

fn check_classes(data: &[PoseSample]) -> Result<()> {
    let missing: Vec<u8> = (0..POSE_CLASSES as u8)
        .filter(|c| !data.iter().any(|s| s.class == *c))
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingPoseClasses(missing));
    }
    if let Some(bad) = data.iter().find(|s| s.class as usize >= POSE_CLASSES) {
        return Err(Error::Config(format!("pose class {} out of range", bad.class)));
    }
    Ok(())
}

fn evaluate(model: &DetectorModel, inputs: &[Tensor], classes: &[usize], epoch: usize) -> Result<PoseEpoch> {
    let parts: Vec<Tensor> = inputs
        .par_chunks(64)
        .map(|c| model.pose_logits(&Tensor::stack_leading(&c.iter().collect::<Vec<_>>())))
        .collect::<Result<_>>()?;
    let logits = Tensor::stack_leading(&parts.iter().collect::<Vec<_>>());
    let (loss, _) = cross_entropy(&logits, classes)?;
    let probs = softmax_rows(&logits);
    let max_softmax_error = probs
        .data()
        .chunks(POSE_CLASSES)
        .map(|r| (r.iter().sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max);
    let correct = logits
        .data()
        .chunks(POSE_CLASSES)
        .zip(classes)
        .filter(|(r, &k)| argmax(r) == k)
        .count();
    Ok(PoseEpoch {
        epoch,
        loss,
        accuracy: correct as f64 / classes.len() as f64,
        max_softmax_error,
    })
}

/// Trains the pose encoder and its classifier with softmax
/// cross-entropy. The encoder's frozen flag is left as it was.
pub fn pretrain_pose(model: &mut DetectorModel, data: &[PoseSample], config: &PoseTrainConfig) -> Result<PoseReport> {
    config.validate()?;
    check_classes(data)?;
    let inputs: Vec<Tensor> = data
        .par_iter()
        .map(|s| model.prepare_pose(&[&s.middle]))
        .collect::<Result<_>>()?;
    let classes: Vec<usize> = data.iter().map(|s| s.class as usize).collect();
    let was_frozen = model.pose_frozen();
    model.set_pose_frozen(false);
    let result = train(model, &inputs, &classes, config);
    model.set_pose_frozen(was_frozen);
    let epochs = result?;
    Ok(PoseReport {
        final_accuracy: epochs.last().map_or(0.0, |e| e.accuracy),
        epochs,
        checksum: model.store.state_checksum(),
    })
}

fn train(model: &mut DetectorModel, inputs: &[Tensor], classes: &[usize], config: &PoseTrainConfig) -> Result<Vec<PoseEpoch>> {
    let mut adam = Adam::new(config.adam);
    let mut history = vec![evaluate(model, inputs, classes, 0)?];
    for epoch in 1..=config.epochs {
        let mut order: Vec<usize> = (0..inputs.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[epoch as u64])));
        for (b, (s, e)) in batch_ranges(order.len(), config.batch_size).into_iter().enumerate() {
            let idx = &order[s..e];
            let x = Tensor::stack_leading(&idx.iter().map(|&i| &inputs[i]).collect::<Vec<_>>());
            let ks: Vec<usize> = idx.iter().map(|&i| classes[i]).collect();
            let (grads, updates) = {
                let mut sess = Session::new(&model.store, Mode::Train, derive_seed(config.seed, &[epoch as u64, b as u64]));
                let logits = model.pose_forward_session(&mut sess, &x);
                if let Some(layer) = sess.graph.fault() {
                    return Err(Error::NumericFault {
                        layer: layer.to_string(),
                        batch: Some(b),
                    });
                }
                let (loss, seed) = cross_entropy(sess.graph.value(logits), &ks)?;
                if !loss.is_finite() {
                    return Err(Error::NumericFault {
                        layer: "pose loss".into(),
                        batch: Some(b),
                    });
                }
                let g = sess.graph.backward(logits, seed);
                (sess.param_grads(&g), sess.take_updates())
            };
            adam.step(&mut model.store, config.learning_rate, &grads);
            apply_updates(&mut model.store, updates);
        }
        let e = evaluate(model, inputs, classes, epoch)?;
        log::info!("pose epoch {epoch}: loss {:.4}, accuracy {:.4}", e.loss, e.accuracy);
        history.push(e);
    }
    Ok(history)
}
