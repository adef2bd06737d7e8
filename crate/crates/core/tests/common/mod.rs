#![allow(dead_code)]

pub mod oracles;

use mvfd_core::geometry::{extract_views, ViewParams};
use mvfd_core::ingestion::synth::render_item;
use mvfd_core::ingestion::{Label, Sample, Split, SyntheticSpec};
use mvfd_core::model::{FusionConfig, ModelConfig};

/// `per_class` synthetic faces of each label, built in memory.
pub fn samples(per_class: usize, seed: u64, split: Split) -> Vec<Sample> {
    let spec = SyntheticSpec::new(per_class.max(2), seed);
    let params = ViewParams::default();
    let mut out = Vec::new();
    for i in 0..per_class {
        for label in [Label::Real, Label::Fake] {
            let item = render_item(&spec, label, i, (i % 13) as u8);
            let views = extract_views(&item.image, &item.face, &params).unwrap();
            out.push(Sample {
                id: format!("{}#0", item.stem()),
                label,
                split,
                face: item.face,
                views: views.into(),
            });
        }
    }
    out
}

/// A tiny model with a narrow head, for fast API tests.
pub fn small_config(seed: u64) -> ModelConfig {
    let mut cfg = ModelConfig::tiny(8, seed);
    cfg.fusion = FusionConfig {
        h1: 16,
        f: 8,
        stage2_hidden: 8,
        ..FusionConfig::default()
    };
    cfg
}
