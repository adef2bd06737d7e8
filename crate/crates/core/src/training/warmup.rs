use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{at_batch, batch_ranges, bce_logit_grad, bce_loss, derive_seed, Example, TrainConfig};
use crate::error::{Error, Result};
use crate::model::DetectorModel;
use crate::nn::{apply_updates, Adam, Linear, Mode, Session, Tensor};

const WARMUP_STREAM: u64 = 0x5741_524d;

/// Trains each view encoder alone through a temporary linear classifier,
/// which is discarded afterwards.
pub(super) fn warm_up_views(model: &mut DetectorModel, examples: &[Example], config: &TrainConfig) -> Result<()> {
    for (v, kind) in model.views().into_iter().enumerate() {
        let prefix = DetectorModel::view_prefix(kind);
        let encoder = model.encoder(kind).expect("configured view").clone();
        let mut store = model.store.clone();
        store.set_trainable("", false);
        store.set_trainable(&prefix, true);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[WARMUP_STREAM, v as u64]));
        let head = Linear::new(&mut store, "warmup.head", model.config().view_backbone.feature_dim, 1, &mut rng);
        let mut adam = Adam::new(config.adam);
        for epoch in 1..=config.per_view_warmup_epochs {
            let mut order: Vec<usize> = (0..examples.len()).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[WARMUP_STREAM, v as u64, epoch as u64])));
            for (b, (s, e)) in batch_ranges(order.len(), config.batch_size).into_iter().enumerate() {
                let idx = &order[s..e];
                let x = Tensor::stack_leading(&idx.iter().map(|&i| &examples[i].batch.views[v]).collect::<Vec<_>>());
                let ys: Vec<f64> = idx.iter().map(|&i| examples[i].label).collect();
                let (grads, updates) = {
                    let mut sess = Session::new(&store, Mode::Train, derive_seed(config.seed, &[WARMUP_STREAM, epoch as u64, b as u64]));
                    let xv = sess.graph.input(x);
                    let feats = encoder.forward(&mut sess, xv, &prefix).features;
                    let logit = head.forward(&mut sess, feats);
                    let prob = sess.graph.sigmoid(logit);
                    if let Some(layer) = sess.graph.fault() {
                        return Err(at_batch(
                            Error::NumericFault {
                                layer: layer.to_string(),
                                batch: None,
                            },
                            b,
                        ));
                    }
                    let probs = sess.graph.value(prob).data().to_vec();
                    log::debug!("warm-up {kind} epoch {epoch} batch {b}: loss {:.4}", bce_loss(&probs, &ys)?);
                    let g = sess.graph.backward(logit, bce_logit_grad(&probs, &ys)?);
                    (sess.param_grads(&g), sess.take_updates())
                };
                adam.step(&mut store, config.learning_rate, &grads);
                apply_updates(&mut store, updates);
            }
        }
        let ids: Vec<_> = model.store.ids_with_prefix(&prefix).collect();
        for id in ids {
            *model.store.get_mut(id) = store.get(id).clone();
        }
    }
    Ok(())
}
