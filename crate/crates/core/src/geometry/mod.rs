//! Face geometry: landmarks, boxes, and the three nested view crops.
//!
//! The middle view is the detector's face box. The local view is the
//! axis-aligned extent of the landmark convex hull dilated by a fixed
//! margin. The global view is the middle box grown by a fixed number of
//! pixels on each side and clipped to the image. Every view is cropped and
//! resized to a square with aspect-preserving zero padding.

mod detect;
mod hull;
mod image;
mod resize;
mod views;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use self::image::{ImageBuffer, CHANNELS};
pub use detect::{detect_faces, parse_sidecar, sidecar_path, FaceDetectorProvider, SidecarDetector};
pub use hull::{convex_hull, ConvexPolygon};
pub use resize::{resize_bilinear, resize_pad, PadInfo};
pub use views::{crop, extract_views, global_region, local_region, View, ViewImages, ViewParams, ViewSource, ViewTriple};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Point2 { x, y }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

impl From<[f64; 2]> for Point2 {
    fn from([x, y]: [f64; 2]) -> Self {
        Point2 { x, y }
    }
}

impl From<Point2> for [f64; 2] {
    fn from(p: Point2) -> Self {
        [p.x, p.y]
    }
}

/// The five detector landmarks, in detector order.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Point2>", into = "Vec<Point2>")]
pub struct FaceLandmarks {
    pub left_eye: Point2,
    pub right_eye: Point2,
    pub nose: Point2,
    pub mouth_left: Point2,
    pub mouth_right: Point2,
}

impl FaceLandmarks {
    pub fn from_points(p: [Point2; 5]) -> Self {
        FaceLandmarks {
            left_eye: p[0],
            right_eye: p[1],
            nose: p[2],
            mouth_left: p[3],
            mouth_right: p[4],
        }
    }

    pub fn points(&self) -> [Point2; 5] {
        [
            self.left_eye,
            self.right_eye,
            self.nose,
            self.mouth_left,
            self.mouth_right,
        ]
    }

    pub fn validate(&self) -> Result<()> {
        let pts = self.points();
        if !pts.iter().all(Point2::is_finite) {
            return Err(Error::DegenerateGeometry("non-finite landmark".into()));
        }
        if pts.iter().all(|p| p == &pts[0]) {
            return Err(Error::DegenerateGeometry("all five landmarks coincide".into()));
        }
        Ok(())
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Self {
        Self::from_points(self.points().map(|p| Point2::new(p.x + dx, p.y + dy)))
    }
}

impl TryFrom<Vec<Point2>> for FaceLandmarks {
    type Error = String;

    fn try_from(v: Vec<Point2>) -> std::result::Result<Self, String> {
        let arr: [Point2; 5] = v
            .try_into()
            .map_err(|v: Vec<Point2>| format!("expected 5 landmarks, got {}", v.len()))?;
        Ok(Self::from_points(arr))
    }
}

impl From<FaceLandmarks> for Vec<Point2> {
    fn from(l: FaceLandmarks) -> Self {
        l.points().to_vec()
    }
}

/// Axis-aligned box in continuous pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BoundingBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl BoundingBox {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self> {
        let b = BoundingBox { x0, y0, x1, y1 };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.x0, self.y0, self.x1, self.y1].iter().all(|v| v.is_finite());
        if !finite || self.x0 >= self.x1 || self.y0 >= self.y1 {
            return Err(Error::DegenerateGeometry(format!(
                "invalid box ({}, {}, {}, {})",
                self.x0, self.y0, self.x1, self.y1
            )));
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn diagonal(&self) -> f64 {
        self.width().hypot(self.height())
    }

    pub fn expanded(&self, by: f64) -> BoundingBox {
        BoundingBox {
            x0: self.x0 - by,
            y0: self.y0 - by,
            x1: self.x1 + by,
            y1: self.y1 + by,
        }
    }

    pub fn contains_point(&self, p: Point2) -> bool {
        p.x >= self.x0 && p.x <= self.x1 && p.y >= self.y0 && p.y <= self.y1
    }

    pub fn contains_box(&self, other: &BoundingBox) -> bool {
        self.x0 <= other.x0 && self.y0 <= other.y0 && self.x1 >= other.x1 && self.y1 >= other.y1
    }

    /// Outward rounding: floor the minimum corner, ceil the maximum corner.
    pub fn rasterize(&self) -> PixelRect {
        PixelRect {
            x0: self.x0.floor() as i64,
            y0: self.y0.floor() as i64,
            x1: self.x1.ceil() as i64,
            y1: self.y1.ceil() as i64,
        }
    }
}

impl TryFrom<[f64; 4]> for BoundingBox {
    type Error = String;

    fn try_from([x0, y0, x1, y1]: [f64; 4]) -> std::result::Result<Self, String> {
        BoundingBox::new(x0, y0, x1, y1).map_err(|e| e.to_string())
    }
}

impl From<BoundingBox> for [f64; 4] {
    fn from(b: BoundingBox) -> Self {
        [b.x0, b.y0, b.x1, b.y1]
    }
}

/// Integer pixel rectangle, half-open on the max side.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PixelRect {
    pub x0: i64,
    pub y0: i64,
    pub x1: i64,
    pub y1: i64,
}

impl PixelRect {
    pub fn width(&self) -> i64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> i64 {
        self.y1 - self.y0
    }

    pub fn is_empty(&self) -> bool {
        self.x1 <= self.x0 || self.y1 <= self.y0
    }

    pub fn clip(&self, width: usize, height: usize) -> PixelRect {
        PixelRect {
            x0: self.x0.clamp(0, width as i64),
            y0: self.y0.clamp(0, height as i64),
            x1: self.x1.clamp(0, width as i64),
            y1: self.y1.clamp(0, height as i64),
        }
    }

    pub fn contains_rect(&self, other: &PixelRect) -> bool {
        self.x0 <= other.x0 && self.y0 <= other.y0 && self.x1 >= other.x1 && self.y1 >= other.y1
    }
}

/// Which of the three content views.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ViewKind {
    Global,
    Middle,
    Local,
}

impl ViewKind {
    pub const ALL: [ViewKind; 3] = [ViewKind::Global, ViewKind::Middle, ViewKind::Local];

    pub fn as_str(&self) -> &'static str {
        match self {
            ViewKind::Global => "global",
            ViewKind::Middle => "middle",
            ViewKind::Local => "local",
        }
    }
}

impl std::fmt::Display for ViewKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for ViewKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "global" => Ok(ViewKind::Global),
            "middle" => Ok(ViewKind::Middle),
            "local" => Ok(ViewKind::Local),
            other => Err(Error::Config(format!("unknown view `{other}` (global|middle|local)"))),
        }
    }
}

/// Fraction of the box diagonal by which the sanity gate grows the box.
pub const SANITY_GATE_FRACTION: f64 = 0.25;

/// One detected face.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaceRecord {
    #[serde(rename = "image")]
    pub source_image: String,
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub landmarks: FaceLandmarks,
    pub confidence: f64,
    /// Ground-truth head-pose class, when known (synthetic data).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pose_class: Option<u8>,
    /// Set when a landmark falls outside the sanity gate.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub flagged: bool,
}

impl FaceRecord {
    pub fn new(source_image: impl Into<String>, bbox: BoundingBox, landmarks: FaceLandmarks, confidence: f64) -> Self {
        let mut r = FaceRecord {
            source_image: source_image.into(),
            bbox,
            landmarks,
            confidence,
            pose_class: None,
            flagged: false,
        };
        r.flagged = !r.passes_sanity_gate();
        r
    }

    /// Landmarks must lie inside the box grown by a quarter of its diagonal.
    pub fn passes_sanity_gate(&self) -> bool {
        let gate = self.bbox.expanded(SANITY_GATE_FRACTION * self.bbox.diagonal());
        self.landmarks.points().iter().all(|p| gate.contains_point(*p))
    }

    pub fn validate(&self) -> Result<()> {
        self.bbox.validate()?;
        self.landmarks.validate()?;
        if !(0.0..=1.0).contains(&self.confidence) {
            return Err(Error::Detection(format!(
                "confidence {} outside [0, 1]",
                self.confidence
            )));
        }
        Ok(())
    }
}
