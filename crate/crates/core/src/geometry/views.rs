use serde::{Deserialize, Serialize};

use super::hull::ConvexPolygon;
use super::resize::{resize_pad, PadInfo};
use super::{BoundingBox, FaceLandmarks, FaceRecord, ImageBuffer, PixelRect, Point2, ViewKind, CHANNELS};
use crate::error::{Error, Result};

/// Axis-aligned extent of the landmark hull dilated by `margin`.
///
/// Dilating a convex polygon by a disc grows its bounding box by exactly
/// the disc radius, so this is the hull's extent plus `margin` per side.
pub fn local_region(landmarks: &FaceLandmarks, margin: f64) -> Result<BoundingBox> {
    landmarks.validate()?;
    let hull = ConvexPolygon::hull_of(&landmarks.points());
    let (x0, y0, x1, y1) = hull.extent();
    let b = BoundingBox {
        x0: x0 - margin,
        y0: y0 - margin,
        x1: x1 + margin,
        y1: y1 + margin,
    };
    // Collinear landmarks with zero margin collapse one axis.
    b.validate()?;
    Ok(b)
}

/// The middle box pushed outward by `expand` on every side and clipped to
/// the image.
pub fn global_region(middle: &BoundingBox, expand: f64, image: &ImageBuffer) -> Result<BoundingBox> {
    let (w, h) = (image.width() as f64, image.height() as f64);
    let g = middle.expanded(expand);
    let clipped = BoundingBox {
        x0: g.x0.clamp(0.0, w),
        y0: g.y0.clamp(0.0, h),
        x1: g.x1.clamp(0.0, w),
        y1: g.y1.clamp(0.0, h),
    };
    clipped.validate().map_err(|_| Error::EmptyCrop {
        x0: middle.x0,
        y0: middle.y0,
        x1: middle.x1,
        y1: middle.y1,
        width: image.width(),
        height: image.height(),
    })?;
    Ok(clipped)
}

fn clipped_rect(image: &ImageBuffer, bbox: &BoundingBox) -> Result<PixelRect> {
    let r = bbox.rasterize().clip(image.width(), image.height());
    if r.is_empty() {
        return Err(Error::EmptyCrop {
            x0: bbox.x0,
            y0: bbox.y0,
            x1: bbox.x1,
            y1: bbox.y1,
            width: image.width(),
            height: image.height(),
        });
    }
    Ok(r)
}

/// Copies the rasterized, image-clipped box.
pub fn crop(image: &ImageBuffer, bbox: &BoundingBox) -> Result<ImageBuffer> {
    Ok(crop_rect(image, clipped_rect(image, bbox)?))
}

fn crop_rect(image: &ImageBuffer, r: PixelRect) -> ImageBuffer {
    let (w, h) = (r.width() as usize, r.height() as usize);
    let mut data = Vec::with_capacity(w * h * CHANNELS);
    for y in r.y0 as usize..r.y1 as usize {
        let start = (y * image.width() + r.x0 as usize) * CHANNELS;
        data.extend_from_slice(&image.data()[start..start + w * CHANNELS]);
    }
    ImageBuffer::new(w, h, data).expect("non-empty crop")
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViewParams {
    /// Dilation of the landmark hull for the local view, pixels.
    #[serde(default = "default_margin")]
    pub margin: f64,
    /// Outward growth of the face box for the global view, pixels.
    #[serde(default = "default_expand")]
    pub expand: f64,
    /// Output side length.
    #[serde(default = "default_side")]
    pub side: usize,
}

fn default_margin() -> f64 {
    15.0
}
fn default_expand() -> f64 {
    20.0
}
fn default_side() -> usize {
    224
}

impl Default for ViewParams {
    fn default() -> Self {
        ViewParams {
            margin: default_margin(),
            expand: default_expand(),
            side: default_side(),
        }
    }
}

/// One padded view and where it came from.
#[derive(Clone, Debug, PartialEq)]
pub struct View {
    pub image: ImageBuffer,
    pub pad: PadInfo,
    /// Source pixels the view was cropped from.
    pub region: PixelRect,
}

impl View {
    /// Source-image coordinates to view coordinates.
    pub fn map_point(&self, p: Point2) -> Point2 {
        self.pad
            .forward(Point2::new(p.x - self.region.x0 as f64, p.y - self.region.y0 as f64))
    }

    fn build(image: &ImageBuffer, bbox: &BoundingBox, side: usize) -> Result<View> {
        let region = clipped_rect(image, bbox)?;
        let (img, pad) = resize_pad(&crop_rect(image, region), side);
        Ok(View { image: img, pad, region })
    }
}

/// The three aligned views of one face.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewTriple {
    pub global: View,
    pub middle: View,
    pub local: View,
}

impl ViewTriple {
    pub fn get(&self, kind: ViewKind) -> &View {
        match kind {
            ViewKind::Global => &self.global,
            ViewKind::Middle => &self.middle,
            ViewKind::Local => &self.local,
        }
    }

    pub fn get_mut(&mut self, kind: ViewKind) -> &mut View {
        match kind {
            ViewKind::Global => &mut self.global,
            ViewKind::Middle => &mut self.middle,
            ViewKind::Local => &mut self.local,
        }
    }
}

/// Anything that can hand out the three 224x224 view images.
pub trait ViewSource {
    fn view_image(&self, kind: ViewKind) -> &ImageBuffer;
}

impl ViewSource for ViewTriple {
    fn view_image(&self, kind: ViewKind) -> &ImageBuffer {
        &self.get(kind).image
    }
}

/// View images without their crop metadata, e.g. loaded from disk.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewImages {
    pub global: ImageBuffer,
    pub middle: ImageBuffer,
    pub local: ImageBuffer,
}

impl ViewSource for ViewImages {
    fn view_image(&self, kind: ViewKind) -> &ImageBuffer {
        match kind {
            ViewKind::Global => &self.global,
            ViewKind::Middle => &self.middle,
            ViewKind::Local => &self.local,
        }
    }
}

impl From<ViewTriple> for ViewImages {
    fn from(t: ViewTriple) -> Self {
        ViewImages {
            global: t.global.image,
            middle: t.middle.image,
            local: t.local.image,
        }
    }
}

/// Crops and pads the global, middle, and local views of `face`.
pub fn extract_views(image: &ImageBuffer, face: &FaceRecord, params: &ViewParams) -> Result<ViewTriple> {
    face.validate()?;
    let middle = face.bbox;
    let local = local_region(&face.landmarks, params.margin)?;
    let global = global_region(&middle, params.expand, image)?;
    Ok(ViewTriple {
        global: View::build(image, &global, params.side)?,
        middle: View::build(image, &middle, params.side)?,
        local: View::build(image, &local, params.side)?,
    })
}
