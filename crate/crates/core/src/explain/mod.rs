//! Grad-CAM saliency over encoder layers, overlays and comparison panels.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{ConvexPolygon, FaceRecord, ImageBuffer, Point2, View, ViewKind, ViewSource};
use crate::model::{DetectorModel, TapLayout};
use crate::nn::{Graph, Mode, Session, Tensor};

/// A class-activation map on a layer's spatial grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    /// Row-major `height x width`, in `[0, 1]`.
    pub values: Vec<f64>,
    pub width: usize,
    pub height: usize,
    pub view: ViewKind,
    pub layer: String,
    /// What was differentiated.
    pub target: String,
    /// Set when the rectified map was constant, so it could not be
    /// normalized; `values` are then all zero.
    pub degenerate: bool,
}

/// Grad-CAM of one `channels x height x width` activation and its gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct CamMap {
    /// Rectified weighted channel sum, before normalization.
    pub raw: Vec<f64>,
    /// `raw` min-max scaled to `[0, 1]`.
    pub values: Vec<f64>,
    pub degenerate: bool,
}

/// Channel weights are the spatial means of the gradient; the map is the
/// rectified weighted sum of channels, min-max normalized.
pub fn cam_from_activations(act: &[f64], grad: &[f64], channels: usize, height: usize, width: usize) -> CamMap {
    let hw = height * width;
    assert_eq!(act.len(), channels * hw);
    assert_eq!(grad.len(), channels * hw);
    let mut raw = vec![0.0; hw];
    for c in 0..channels {
        let g = &grad[c * hw..(c + 1) * hw];
        let alpha = g.iter().sum::<f64>() / hw as f64;
        for (r, a) in raw.iter_mut().zip(&act[c * hw..(c + 1) * hw]) {
            *r += alpha * a;
        }
    }
    for r in &mut raw {
        *r = r.max(0.0);
    }
    let (lo, hi) = raw
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let degenerate = !(hi > lo);
    let values = if degenerate {
        vec![0.0; hw]
    } else {
        raw.iter().map(|v| (v - lo) / (hi - lo)).collect()
    };
    CamMap { raw, values, degenerate }
}

/// Activation and gradient of sample 0 as `[C, H, W]`.
fn to_chw(act: &Tensor, grad: &Tensor, layout: TapLayout) -> (Vec<f64>, Vec<f64>, usize, usize, usize) {
    match layout {
        TapLayout::Spatial => {
            let (c, h, w) = (act.dim(1), act.dim(2), act.dim(3));
            let n = c * h * w;
            (act.data()[..n].to_vec(), grad.data()[..n].to_vec(), c, h, w)
        }
        TapLayout::Tokens { grid_h, grid_w, skip } => {
            let (t, c) = (act.dim(1), act.dim(2));
            debug_assert_eq!(t, skip + grid_h * grid_w);
            let hw = grid_h * grid_w;
            let reorder = |x: &Tensor| {
                let mut out = vec![0.0; c * hw];
                for p in 0..hw {
                    for ch in 0..c {
                        out[ch * hw + p] = x.data()[(skip + p) * c + ch];
                    }
                }
                out
            };
            (reorder(act), reorder(grad), c, grid_h, grid_w)
        }
        TapLayout::Vector => unreachable!("checked by caller"),
    }
}

/// A layer's activation and the fake-logit gradient at it, `[C, H, W]`
/// row-major, for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerGradients {
    pub layer: String,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub activations: Vec<f64>,
    pub gradients: Vec<f64>,
}

/// Runs one inference-mode forward and backward pass and returns what
/// Grad-CAM needs at `layer` of the `view` encoder (its default layer when
/// `None`). Token layers are reshaped to their patch grid.
pub fn layer_gradients<V: ViewSource>(
    model: &DetectorModel,
    views: &V,
    view: ViewKind,
    layer: Option<&str>,
) -> Result<LayerGradients> {
    let backbone = model.encoder(view).ok_or_else(|| Error::UnsupportedLayer {
        layer: layer.unwrap_or("").to_string(),
        reason: format!("the model has no {view} encoder"),
    })?;
    let layer = layer.map(str::to_string).unwrap_or_else(|| backbone.default_tap());
    let batch = model.prepare(&[views], model.uses_pose())?;
    let mut s = Session::with_graph(Graph::tracking_all(), &model.store, Mode::Eval, 0);
    let out = model.forward_session(&mut s, &batch)?;
    let enc = &out
        .encoders
        .iter()
        .find(|(k, _)| *k == view)
        .expect("encoder present")
        .1;
    let tap = enc.tap(&layer).ok_or_else(|| Error::UnsupportedLayer {
        layer: layer.clone(),
        reason: format!(
            "no such layer in the {view} encoder (available: {})",
            enc.taps.iter().map(|t| t.name.as_str()).collect::<Vec<_>>().join(", ")
        ),
    })?;
    if tap.layout == TapLayout::Vector {
        return Err(Error::UnsupportedLayer {
            layer,
            reason: "activation has no spatial grid".into(),
        });
    }
    let grads = s.graph.backward(out.logit, Tensor::full(&[1, 1], 1.0));
    let act = s.graph.value(tap.var);
    let zero = Tensor::zeros(act.shape());
    let grad = grads.get(tap.var).unwrap_or(&zero);
    let (activations, gradients, channels, height, width) = to_chw(act, grad, tap.layout);
    Ok(LayerGradients {
        layer,
        channels,
        height,
        width,
        activations,
        gradients,
    })
}

/// Grad-CAM of the fake logit for one sample. See [`layer_gradients`].
pub fn gradcam<V: ViewSource>(model: &DetectorModel, views: &V, view: ViewKind, layer: Option<&str>) -> Result<Heatmap> {
    let lg = layer_gradients(model, views, view, layer)?;
    let cam = cam_from_activations(&lg.activations, &lg.gradients, lg.channels, lg.height, lg.width);
    Ok(Heatmap {
        values: cam.values,
        width: lg.width,
        height: lg.height,
        view,
        layer: lg.layer,
        target: "fake logit".into(),
        degenerate: cam.degenerate,
    })
}

impl Heatmap {
    /// Bilinear resampling to `width x height` with pixel-center alignment.
    pub fn upsample(&self, width: usize, height: usize) -> Vec<f64> {
        let (sw, sh) = (self.width, self.height);
        let mut out = Vec::with_capacity(width * height);
        let coord = |i: usize, dst: usize, src: usize| {
            let f = ((i as f64 + 0.5) * src as f64 / dst as f64 - 0.5).clamp(0.0, (src - 1) as f64);
            let i0 = f.floor() as usize;
            (i0, (i0 + 1).min(src - 1), f - i0 as f64)
        };
        for y in 0..height {
            let (y0, y1, fy) = coord(y, height, sh);
            for x in 0..width {
                let (x0, x1, fx) = coord(x, width, sw);
                let v = |xx: usize, yy: usize| self.values[yy * sw + xx];
                let top = v(x0, y0) * (1.0 - fx) + v(x1, y0) * fx;
                let bottom = v(x0, y1) * (1.0 - fx) + v(x1, y1) * fx;
                out.push(top * (1.0 - fy) + bottom * fy);
            }
        }
        out
    }
}

/// Blue-to-red "jet" color for `t` in `[0, 1]`.
pub fn jet(t: f64) -> [u8; 3] {
    let t = t.clamp(0.0, 1.0);
    let ch = |c: f64| ((1.5 - (4.0 * t - c).abs()).clamp(0.0, 1.0) * 255.0).round() as u8;
    [ch(3.0), ch(2.0), ch(1.0)]
}

/// Alpha-blends the color-mapped heatmap, upsampled to the image size,
/// over a copy of `image`.
pub fn overlay(heatmap: &Heatmap, image: &ImageBuffer, alpha: f64) -> Result<ImageBuffer> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("overlay alpha {alpha} outside [0, 1]")));
    }
    if heatmap.values.len() != heatmap.width * heatmap.height || heatmap.values.is_empty() {
        return Err(Error::SizeMismatch(format!(
            "heatmap holds {} values for a {}x{} grid",
            heatmap.values.len(),
            heatmap.width,
            heatmap.height
        )));
    }
    let up = heatmap.upsample(image.width(), image.height());
    if up.len() != image.width() * image.height() {
        return Err(Error::SizeMismatch(format!(
            "upsampled heatmap has {} pixels, image has {}",
            up.len(),
            image.width() * image.height()
        )));
    }
    let mut out = image.clone();
    for (px, &v) in out.data_mut().chunks_mut(3).zip(&up) {
        let color = jet(v);
        for (p, c) in px.iter_mut().zip(color) {
            *p = ((1.0 - alpha) * f64::from(*p) + alpha * f64::from(c)).round() as u8;
        }
    }
    Ok(out)
}

/// Side-by-side panel: the original followed by each overlay.
pub fn panel(original: &ImageBuffer, overlays: &[&ImageBuffer]) -> ImageBuffer {
    let mut parts = vec![original];
    parts.extend_from_slice(overlays);
    ImageBuffer::hconcat(&parts)
}

/// Share of the upsampled heatmap's mass that falls inside the landmark
/// hull, with the landmarks mapped into `view` coordinates.
pub fn hull_mass_ratio(heatmap: &Heatmap, view: &View, face: &FaceRecord) -> f64 {
    let (w, h) = (view.image.width(), view.image.height());
    let hull = ConvexPolygon::hull_of(&face.landmarks.points().map(|p| view.map_point(p)));
    let up = heatmap.upsample(w, h);
    let (mut inside, mut total) = (0.0, 0.0);
    for y in 0..h {
        for x in 0..w {
            let v = up[y * w + x];
            total += v;
            if hull.contains(Point2::new(x as f64 + 0.5, y as f64 + 0.5)) {
                inside += v;
            }
        }
    }
    if total > 0.0 {
        inside / total
    } else {
        0.0
    }
}
