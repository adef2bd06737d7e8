//! Procedural faces for desk-scale experiments.
//!
//! Each image is a smooth background with an elliptical face whose eyes,
//! nose and mouth come from a rotated 3-D landmark template. Fakes receive
//! an artifact confined to the interior of the landmark hull.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{make_splits, DatasetManifest, Label, ManifestEntry};
use crate::error::{Error, Result};
use crate::geometry::{sidecar_path, BoundingBox, ConvexPolygon, FaceLandmarks, FaceRecord, ImageBuffer, Point2};
use crate::model::POSE_CLASSES;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ArtifactKind {
    /// A shifted, tinted copy of the face blended in with a visible seam.
    #[default]
    CentralBlendSeam,
    /// Additive Gaussian noise.
    PatchNoise,
    /// Per-channel gain change.
    ColorMismatch,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PoseDistribution {
    #[default]
    Uniform,
    /// Relative weight per pose class.
    Weights(Vec<f64>),
}

impl PoseDistribution {
    fn weights(&self) -> Result<Vec<f64>> {
        match self {
            PoseDistribution::Uniform => Ok(vec![1.0; POSE_CLASSES]),
            PoseDistribution::Weights(w) => {
                if w.len() != POSE_CLASSES || w.iter().any(|v| !v.is_finite() || *v < 0.0) || w.iter().sum::<f64>() <= 0.0
                {
                    return Err(Error::Config(format!(
                        "pose weights must be {POSE_CLASSES} non-negative numbers with a positive sum"
                    )));
                }
                Ok(w.clone())
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    /// Images per class.
    pub count: usize,
    #[serde(default = "default_side")]
    pub side: usize,
    #[serde(default)]
    pub artifact: ArtifactKind,
    #[serde(default)]
    pub pose: PoseDistribution,
    #[serde(default)]
    pub seed: u64,
    /// Artifact intensity multiplier.
    #[serde(default = "default_strength")]
    pub strength: f64,
}

fn default_side() -> usize {
    256
}

fn default_strength() -> f64 {
    1.0
}

impl SyntheticSpec {
    pub fn new(count: usize, seed: u64) -> Self {
        SyntheticSpec {
            count,
            side: default_side(),
            artifact: ArtifactKind::default(),
            pose: PoseDistribution::Uniform,
            seed,
            strength: default_strength(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.count < 2 {
            return Err(Error::Config(format!("synthetic count must be at least 2 per class, got {}", self.count)));
        }
        if self.side < 64 {
            return Err(Error::Config(format!("synthetic image side must be at least 64, got {}", self.side)));
        }
        if !(self.strength.is_finite() && self.strength >= 0.0) {
            return Err(Error::Config("artifact strength must be finite and non-negative".into()));
        }
        self.pose.weights()?;
        Ok(())
    }
}

/// Yaw and pitch in degrees for each pose class: frontal, four yaws, four
/// pitches, four diagonals.
pub const POSE_ANGLES: [(f64, f64); POSE_CLASSES] = [
    (0.0, 0.0),
    (-25.0, 0.0),
    (25.0, 0.0),
    (-50.0, 0.0),
    (50.0, 0.0),
    (0.0, -20.0),
    (0.0, 20.0),
    (0.0, -40.0),
    (0.0, 40.0),
    (-30.0, -25.0),
    (30.0, -25.0),
    (-30.0, 25.0),
    (30.0, 25.0),
];

/// Landmark template in face units: x right, y down, z toward the camera.
const TEMPLATE: [[f64; 3]; 5] = [
    [-0.38, -0.22, 0.55],
    [0.38, -0.22, 0.55],
    [0.0, 0.12, 0.95],
    [-0.30, 0.45, 0.60],
    [0.30, 0.45, 0.60],
];

/// Class counts summing to `total`, by largest remainder.
pub fn quotas(weights: &[f64], total: usize) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    let exact: Vec<f64> = weights.iter().map(|w| w / sum * total as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (exact[a] - exact[a].floor(), exact[b] - exact[b].floor());
        rb.partial_cmp(&ra).expect("finite").then(a.cmp(&b))
    });
    let short = total - counts.iter().sum::<usize>();
    for &i in order.iter().take(short) {
        counts[i] += 1;
    }
    counts
}

/// One rendered image with its annotation.
#[derive(Clone, Debug)]
pub struct SyntheticItem {
    pub label: Label,
    pub index: usize,
    pub pose_class: u8,
    pub image: ImageBuffer,
    /// The image before any artifact (equal to `image` for reals).
    pub clean: ImageBuffer,
    pub face: FaceRecord,
}

impl SyntheticItem {
    pub fn stem(&self) -> String {
        format!("{}_{:04}", self.label.name(), self.index)
    }
}

fn item_rng(seed: u64, label: Label, index: usize, salt: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream((salt << 48) | (u64::from(u8::from(label)) << 40) | index as u64);
    r
}

#[derive(Clone, Copy)]
struct FaceParams {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    yaw: f64,
    pitch: f64,
    skin: [f64; 3],
}

impl FaceParams {
    fn project(&self, p: [f64; 3]) -> Point2 {
        let (sy, cyaw) = self.yaw.to_radians().sin_cos();
        let (sp, cp) = self.pitch.to_radians().sin_cos();
        let x = p[0] * cyaw + p[2] * sy;
        let z = -p[0] * sy + p[2] * cyaw;
        let y = p[1] * cp - z * sp;
        Point2::new(self.cx + self.a * x, self.cy + self.b * y)
    }
}

fn mix(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    [0, 1, 2].map(|c| a[c] * (1.0 - t) + b[c] * t)
}

/// Soft coverage of an axis-aligned ellipse at pixel center `(x, y)`.
fn ellipse_cover(x: f64, y: f64, cx: f64, cy: f64, rx: f64, ry: f64) -> f64 {
    let r = (((x - cx) / rx).powi(2) + ((y - cy) / ry).powi(2)).sqrt();
    // Signed distance approximated along the radius, one-pixel ramp.
    ((1.0 - r) * rx.min(ry) + 0.5).clamp(0.0, 1.0)
}

fn render_clean(side: usize, f: &FaceParams, rng: &mut ChaCha8Rng) -> ImageBuffer {
    let s = side as f64;
    let bg0: [f64; 3] = [0, 1, 2].map(|_| rng.random_range(30.0..200.0));
    let bg1: [f64; 3] = [0, 1, 2].map(|_| rng.random_range(30.0..200.0));
    let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let blobs: Vec<(f64, f64, f64, [f64; 3])> = (0..3)
        .map(|_| {
            (
                rng.random_range(0.0..s),
                rng.random_range(0.0..s),
                rng.random_range(0.05..0.2) * s,
                [0, 1, 2].map(|_| rng.random_range(20.0..230.0)),
            )
        })
        .collect();
    let lm: Vec<Point2> = TEMPLATE.iter().map(|&p| f.project(p)).collect();
    let (sy, _) = f.yaw.to_radians().sin_cos();
    let (sp, _) = f.pitch.to_radians().sin_cos();
    let sclera = [235.0, 235.0, 230.0];
    let iris = [45.0, 35.0, 30.0];
    let lips = [150.0, 55.0, 60.0];
    let eye_rx = 0.15 * f.a;
    let eye_ry = 0.07 * f.b;
    let mouth_c = Point2::new((lm[3].x + lm[4].x) / 2.0, (lm[3].y + lm[4].y) / 2.0);
    let mouth_rx = ((lm[4].x - lm[3].x) / 2.0).abs().max(2.0);
    let noise = Normal::new(0.0, 3.0).expect("valid sigma");
    ImageBuffer::from_fn(side, side, |x, y| {
        let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
        let t = ((px * angle.cos() + py * angle.sin()) / s).clamp(-1.0, 1.0) * 0.5 + 0.5;
        let mut c = mix(bg0, bg1, t);
        for &(bx, by, r, col) in &blobs {
            c = mix(c, col, 0.35 * ellipse_cover(px, py, bx, by, r, r));
        }
        let face = ellipse_cover(px, py, f.cx, f.cy, f.a, f.b);
        if face > 0.0 {
            // Directional shading so yaw and pitch are visible in the skin.
            let nx = (px - f.cx) / f.a;
            let ny = (py - f.cy) / f.b;
            let shade = 1.0 + 0.28 * nx * sy - 0.22 * ny * sp;
            let skin = f.skin.map(|v| v * shade);
            c = mix(c, skin, face);
            for e in &lm[..2] {
                c = mix(c, sclera, ellipse_cover(px, py, e.x, e.y, eye_rx, eye_ry));
                let ir = 0.055 * f.a;
                c = mix(c, iris, ellipse_cover(px, py, e.x + 0.04 * f.a * sy, e.y, ir, ir));
            }
            let nose = lm[2];
            c = mix(c, f.skin.map(|v| v * 0.7), ellipse_cover(px, py, nose.x, nose.y, 0.07 * f.a, 0.06 * f.b));
            c = mix(c, lips, ellipse_cover(px, py, mouth_c.x, mouth_c.y, mouth_rx, 0.05 * f.b));
        }
        let n: f64 = noise.sample(&mut *rng);
        c.map(|v| (v + n).round().clamp(0.0, 255.0) as u8)
    })
}

fn smoothstep(e0: f64, e1: f64, x: f64) -> f64 {
    let t = ((x - e0) / (e1 - e0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Applies `kind` to pixels whose centers lie strictly inside `hull`.
pub fn apply_artifact(
    clean: &ImageBuffer,
    hull: &ConvexPolygon,
    kind: ArtifactKind,
    strength: f64,
    face_scale: (f64, f64),
    rng: &mut ChaCha8Rng,
) -> ImageBuffer {
    let mut out = clean.clone();
    let (x0, y0, x1, y1) = hull.extent();
    let (w, h) = (clean.width() as i64, clean.height() as i64);
    let xr = (x0.floor() as i64).max(0)..(x1.ceil() as i64).min(w);
    let yr = (y0.floor() as i64).max(0)..(y1.ceil() as i64).min(h);
    let shift = ((0.16 * face_scale.0).round() as i64, (0.10 * face_scale.1).round() as i64);
    let tint = [20.0, 6.0, -16.0];
    let gains = [1.22, 0.95, 0.80];
    let noise = Normal::new(0.0, 24.0).expect("valid sigma");
    for y in yr {
        for x in xr.clone() {
            let d = hull.depth(Point2::new(x as f64 + 0.5, y as f64 + 0.5));
            if d <= 0.0 {
                continue;
            }
            let alpha = smoothstep(2.0, 8.0, d);
            let src = clean.get(x as usize, y as usize).map(f64::from);
            let replaced: [f64; 3] = match kind {
                ArtifactKind::CentralBlendSeam => {
                    let sx = (x + shift.0).clamp(0, w - 1) as usize;
                    let sy = (y + shift.1).clamp(0, h - 1) as usize;
                    let donor = clean.get(sx, sy).map(f64::from);
                    let blended = mix(src, [0, 1, 2].map(|c| donor[c] + tint[c] * strength), alpha.min(strength));
                    // Dark seam where the blend begins.
                    let seam = (-((d - 4.0) / 1.2).powi(2)).exp() * 30.0 * strength;
                    blended.map(|v| v - seam)
                }
                ArtifactKind::PatchNoise => {
                    let n: f64 = noise.sample(&mut *rng);
                    src.map(|v| v + alpha * n * strength)
                }
                ArtifactKind::ColorMismatch => {
                    [0, 1, 2].map(|c| src[c] + alpha * strength * (src[c] * gains[c] - src[c] + tint[c] * 0.5))
                }
            };
            out.set(x as usize, y as usize, replaced.map(|v| v.round().clamp(0.0, 255.0) as u8));
        }
    }
    out
}

/// Renders one image. Deterministic in `(spec.seed, label, index, pose)`.
pub fn render_item(spec: &SyntheticSpec, label: Label, index: usize, pose_class: u8) -> SyntheticItem {
    render_with_salt(spec, label, index, pose_class, 0)
}

fn render_with_salt(spec: &SyntheticSpec, label: Label, index: usize, pose_class: u8, salt: u64) -> SyntheticItem {
    let mut rng = item_rng(spec.seed, label, index, salt);
    let s = spec.side as f64;
    let a = rng.random_range(0.20..0.24) * s;
    let (yaw, pitch) = POSE_ANGLES[pose_class as usize];
    let f = FaceParams {
        cx: s / 2.0 + rng.random_range(-0.06..0.06) * s,
        cy: s / 2.0 + rng.random_range(-0.05..0.05) * s,
        a,
        b: a * rng.random_range(1.2..1.35),
        yaw: yaw + rng.random_range(-4.0..4.0),
        pitch: pitch + rng.random_range(-3.0..3.0),
        skin: [
            rng.random_range(150.0..235.0),
            rng.random_range(105.0..185.0),
            rng.random_range(80.0..160.0),
        ],
    };
    let clean = render_clean(spec.side, &f, &mut rng);
    let points: Vec<Point2> = TEMPLATE.iter().map(|&p| f.project(p)).collect();
    let landmarks = FaceLandmarks::from_points([points[0], points[1], points[2], points[3], points[4]]);
    let jitter = |r: &mut ChaCha8Rng| r.random_range(-2.0..2.0);
    let bbox = BoundingBox {
        x0: (f.cx - f.a + jitter(&mut rng)).max(0.0),
        y0: (f.cy - f.b + jitter(&mut rng)).max(0.0),
        x1: (f.cx + f.a + jitter(&mut rng)).min(s),
        y1: (f.cy + f.b + jitter(&mut rng)).min(s),
    };
    let image = match label {
        Label::Real => clean.clone(),
        Label::Fake => apply_artifact(
            &clean,
            &ConvexPolygon::hull_of(&points),
            spec.artifact,
            spec.strength,
            (f.a, f.b),
            &mut rng,
        ),
    };
    let mut face = FaceRecord::new("", bbox, landmarks, 0.99);
    face.pose_class = Some(pose_class);
    let mut item = SyntheticItem {
        label,
        index,
        pose_class,
        image,
        clean,
        face,
    };
    item.face.source_image = format!("{}.png", item.stem());
    item
}

/// Pose class for every index of one label: quota-exact, then shuffled.
pub fn pose_assignment(spec: &SyntheticSpec, label: Label) -> Result<Vec<u8>> {
    let q = quotas(&spec.pose.weights()?, spec.count);
    let mut classes: Vec<u8> = q
        .iter()
        .enumerate()
        .flat_map(|(c, &n)| std::iter::repeat_n(c as u8, n))
        .collect();
    classes.shuffle(&mut item_rng(spec.seed, label, usize::MAX >> 24, 1));
    Ok(classes)
}

/// Renders every item of the spec in memory.
pub fn render_all(spec: &SyntheticSpec) -> Result<Vec<SyntheticItem>> {
    spec.validate()?;
    let mut jobs = Vec::new();
    for label in [Label::Real, Label::Fake] {
        for (i, c) in pose_assignment(spec, label)?.into_iter().enumerate() {
            jobs.push((label, i, c));
        }
    }
    Ok(jobs
        .into_par_iter()
        .map(|(label, i, c)| render_item(spec, label, i, c))
        .collect())
}

/// Artifact-free faces with exactly `per_class` images of each pose class.
pub fn render_pose_set(per_class: usize, side: usize, seed: u64) -> Vec<SyntheticItem> {
    let spec = SyntheticSpec {
        side,
        ..SyntheticSpec::new(per_class * POSE_CLASSES, seed)
    };
    (0..per_class * POSE_CLASSES)
        .into_par_iter()
        .map(|i| render_with_salt(&spec, Label::Real, i, (i % POSE_CLASSES) as u8, 2))
        .collect()
}

/// Writes `count` real and `count` fake images with sidecar annotations
/// under `out_dir/images`, and a split manifest at `out_dir/manifest.jsonl`.
pub fn generate_synthetic(spec: &SyntheticSpec, out_dir: &Path) -> Result<DatasetManifest> {
    let items = render_all(spec)?;
    let img_dir = out_dir.join("images");
    items.par_iter().try_for_each(|item| -> Result<()> {
        let path = img_dir.join(&item.face.source_image);
        item.image.save_png(&path)?;
        let mut line = serde_json::to_string(&item.face)?;
        line.push('\n');
        crate::artifact::write_atomic(&sidecar_path(&path), line.as_bytes())
    })?;
    let entries = items
        .iter()
        .map(|item| ManifestEntry {
            image: format!("images/{}", item.face.source_image),
            label: item.label,
            split: None,
            unit: item.stem(),
            faces: vec![item.face.clone()],
            views: None,
        })
        .collect();
    let source = format!(
        "synthetic count={} side={} artifact={} seed={}",
        spec.count,
        spec.side,
        serde_json::to_value(spec.artifact)?.as_str().unwrap_or("?"),
        spec.seed
    );
    let mut manifest = make_splits(entries, spec.seed, &source)?;
    manifest.base_dir = out_dir.to_path_buf();
    manifest.save(&out_dir.join("manifest.jsonl"))?;
    Ok(manifest)
}
