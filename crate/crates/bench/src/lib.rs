//! Fixtures shared by the benchmarks.

use mvfd_core::geometry::{extract_views, FaceRecord, ImageBuffer, ViewImages, ViewParams};
use mvfd_core::ingestion::synth::render_item;
use mvfd_core::ingestion::{Label, SyntheticSpec};
use mvfd_core::model::{DetectorModel, ModelConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// One synthetic fake: the full image, its face and its views.
pub fn fake_face(seed: u64) -> (ImageBuffer, FaceRecord, ViewImages) {
    let item = render_item(&SyntheticSpec::new(2, seed), Label::Fake, 0, 0);
    let views = extract_views(&item.image, &item.face, &ViewParams::default()).expect("synthetic faces are valid");
    (item.image, item.face, views.into())
}

pub fn tiny_model(seed: u64) -> DetectorModel {
    DetectorModel::build(&ModelConfig::tiny(16, seed)).expect("tiny config is valid")
}

/// Scores with ties and both labels, as `(scores, is_fake)`.
pub fn scores(n: usize, seed: u64) -> (Vec<f64>, Vec<bool>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels: Vec<bool> = (0..n).map(|i| i % 2 == 0 || rng.random_bool(0.3)).collect();
    let scores = labels
        .iter()
        .map(|&f| ((rng.random::<f64>() + if f { 0.3 } else { 0.0 }) * 100.0).round() / 100.0)
        .collect();
    (scores, labels)
}
