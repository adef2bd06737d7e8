mod common;

use mvfd_core::explain::{cam_from_activations, gradcam, hull_mass_ratio, layer_gradients, overlay, panel, Heatmap};
use mvfd_core::geometry::{extract_views, ImageBuffer, ViewImages, ViewKind, ViewParams};
use mvfd_core::ingestion::synth::render_item;
use mvfd_core::ingestion::{Label, SyntheticSpec};
use mvfd_core::model::DetectorModel;
use mvfd_core::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn noise_views(seed: u64) -> ViewImages {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut img = || ImageBuffer::from_fn(224, 224, |_, _| [rng.random(), rng.random(), rng.random()]);
    ViewImages {
        global: img(),
        middle: img(),
        local: img(),
    }
}

/// Grad-CAM written out with explicit index loops.
fn loop_cam(act: &[f64], grad: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let mut alpha = vec![0.0; c];
    for k in 0..c {
        for y in 0..h {
            for x in 0..w {
                alpha[k] += grad[(k * h + y) * w + x];
            }
        }
        alpha[k] /= (h * w) as f64;
    }
    let mut map = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for k in 0..c {
                s += alpha[k] * act[(k * h + y) * w + x];
            }
            map[y * w + x] = if s > 0.0 { s } else { 0.0 };
        }
    }
    let lo = map.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = map.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo <= 0.0 {
        return vec![0.0; h * w];
    }
    map.iter().map(|v| (v - lo) / (hi - lo)).collect()
}

#[test]
fn gradcam_matches_a_loop_oracle() {
    for seed in 0..4 {
        let model = DetectorModel::build(&common::small_config(seed)).unwrap();
        let views = noise_views(100 + seed);
        for view in ViewKind::ALL {
            for layer in ["conv1", "conv2"] {
                let lg = layer_gradients(&model, &views, view, Some(layer)).unwrap();
                let hm = gradcam(&model, &views, view, Some(layer)).unwrap();
                assert_eq!((hm.width, hm.height), (lg.width, lg.height));
                let want = loop_cam(&lg.activations, &lg.gradients, lg.channels, lg.height, lg.width);
                for (a, b) in hm.values.iter().zip(&want) {
                    assert!((a - b).abs() < 1e-6);
                }
            }
        }
    }
}

fn logit(model: &DetectorModel, views: &ViewImages) -> f64 {
    let p = model.forward(&[views]).unwrap().probs[0];
    p.ln() - (1.0 - p).ln()
}

#[test]
fn layer_gradients_agree_with_finite_differences() {
    // A bias shift moves every position of one channel before the ReLU, so
    // the logit's bias derivative is the masked sum of the tap gradient.
    let mut model = DetectorModel::build(&common::small_config(9)).unwrap();
    let views = noise_views(7);
    let lg = layer_gradients(&model, &views, ViewKind::Middle, Some("conv2")).unwrap();
    let hw = lg.height * lg.width;
    let id = model.store.find("middle.conv2.bias").unwrap();
    let eps = 1e-6;
    for c in 0..lg.channels {
        let analytic: f64 = (0..hw)
            .filter(|&p| lg.activations[c * hw + p] > 0.0)
            .map(|p| lg.gradients[c * hw + p])
            .sum();
        let base = model.store.get(id).data()[c];
        let mut at = |v: f64| {
            let t = model.store.get_mut(id);
            let mut d = t.data().to_vec();
            d[c] = v;
            *t = mvfd_core::nn::Tensor::new(t.shape().to_vec(), d);
            logit(&model, &views)
        };
        let numeric = (at(base + eps) - at(base - eps)) / (2.0 * eps);
        at(base);
        let scale = analytic.abs().max(numeric.abs()).max(1e-6);
        assert!((analytic - numeric).abs() / scale < 1e-3, "channel {c}: {analytic} vs {numeric}");
    }
}

#[test]
fn cam_invariants_hold_on_random_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..100 {
        let (c, h, w) = (rng.random_range(1..6), rng.random_range(1..8), rng.random_range(1..8));
        let act: Vec<f64> = (0..c * h * w).map(|_| rng.random_range(0.0..3.0)).collect();
        let grad: Vec<f64> = (0..c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
        let cam = cam_from_activations(&act, &grad, c, h, w);
        assert!(cam.raw.iter().all(|&v| v >= 0.0));
        assert!(cam.values.iter().all(|&v| (0.0..=1.0).contains(&v)));
        if cam.degenerate {
            assert!(cam.values.iter().all(|&v| v == 0.0));
        } else {
            let hi = cam.values.iter().cloned().fold(0.0, f64::max);
            let lo = cam.values.iter().cloned().fold(1.0, f64::min);
            assert!((hi - 1.0).abs() < 1e-12 && lo.abs() < 1e-12);
        }
        let k = rng.random_range(0.1..10.0);
        let scaled: Vec<f64> = grad.iter().map(|g| g * k).collect();
        let again = cam_from_activations(&act, &scaled, c, h, w);
        assert_eq!(again.degenerate, cam.degenerate);
        for (a, b) in again.values.iter().zip(&cam.values) {
            assert!((a - b).abs() < 1e-9);
        }
    }
}

#[test]
fn non_spatial_and_unknown_layers_are_rejected() {
    let model = DetectorModel::build(&common::small_config(0)).unwrap();
    let views = noise_views(1);
    assert!(matches!(
        gradcam(&model, &views, ViewKind::Local, Some("features")),
        Err(Error::UnsupportedLayer { .. })
    ));
    match gradcam(&model, &views, ViewKind::Local, Some("conv9")) {
        Err(Error::UnsupportedLayer { reason, .. }) => assert!(reason.contains("conv2"), "{reason}"),
        other => panic!("{other:?}"),
    }
    let mut cfg = common::small_config(0);
    cfg.views = vec![ViewKind::Global];
    cfg.use_pose = false;
    let single = DetectorModel::build(&cfg).unwrap();
    assert!(matches!(
        gradcam(&single, &views, ViewKind::Local, None),
        Err(Error::UnsupportedLayer { .. })
    ));
    let hm = gradcam(&single, &views, ViewKind::Global, None).unwrap();
    assert_eq!(hm.layer, "conv2");
}

#[test]
fn hull_mass_of_a_uniform_map_is_the_hull_area_share() {
    let item = render_item(&SyntheticSpec::new(2, 4), Label::Fake, 0, 0);
    let tri = extract_views(&item.image, &item.face, &ViewParams::default()).unwrap();
    let view = tri.get(ViewKind::Local);
    let uniform = Heatmap {
        values: vec![1.0; 4],
        width: 2,
        height: 2,
        view: ViewKind::Local,
        layer: "conv2".into(),
        target: "fake logit".into(),
        degenerate: false,
    };
    let share = hull_mass_ratio(&uniform, view, &item.face);
    assert!(share > 0.05 && share < 0.95, "{share}");
    let zero = Heatmap { values: vec![0.0; 4], ..uniform.clone() };
    assert_eq!(hull_mass_ratio(&zero, view, &item.face), 0.0);
}

#[test]
fn panels_hold_the_original_and_each_overlay() {
    let model = DetectorModel::build(&common::small_config(0)).unwrap();
    let views = noise_views(2);
    let hm = gradcam(&model, &views, ViewKind::Global, None).unwrap();
    let over = overlay(&hm, &views.global, 0.4).unwrap();
    let p = panel(&views.global, &[&over, &over]);
    assert_eq!((p.width(), p.height()), (3 * 224, 224));
}
