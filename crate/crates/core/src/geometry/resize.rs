use serde::{Deserialize, Serialize};

use super::{ImageBuffer, Point2, CHANNELS};

/// How a crop was placed inside its padded square.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PadInfo {
    /// Nominal scale: `side / max(width, height)` of the source crop.
    pub scale: f64,
    pub source_width: usize,
    pub source_height: usize,
    pub content_width: usize,
    pub content_height: usize,
    pub offset_x: usize,
    pub offset_y: usize,
}

impl PadInfo {
    /// Crop coordinates to padded-view coordinates.
    pub fn forward(&self, p: Point2) -> Point2 {
        let sx = self.content_width as f64 / self.source_width as f64;
        let sy = self.content_height as f64 / self.source_height as f64;
        Point2::new(p.x * sx + self.offset_x as f64, p.y * sy + self.offset_y as f64)
    }

    /// Padded-view coordinates back to crop coordinates.
    pub fn inverse(&self, p: Point2) -> Point2 {
        let sx = self.content_width as f64 / self.source_width as f64;
        let sy = self.content_height as f64 / self.source_height as f64;
        Point2::new((p.x - self.offset_x as f64) / sx, (p.y - self.offset_y as f64) / sy)
    }

    /// Whether a view pixel lies in the content region (not padding).
    pub fn in_content(&self, x: usize, y: usize) -> bool {
        x >= self.offset_x
            && x < self.offset_x + self.content_width
            && y >= self.offset_y
            && y < self.offset_y + self.content_height
    }
}

/// Bilinear resampling with pixel-center alignment and edge clamping.
pub fn resize_bilinear(src: &ImageBuffer, width: usize, height: usize) -> ImageBuffer {
    let (sw, sh) = (src.width(), src.height());
    let fx = sw as f64 / width as f64;
    let fy = sh as f64 / height as f64;
    let taps = |dst: usize, factor: f64, len: usize| {
        let s = ((dst as f64 + 0.5) * factor - 0.5).clamp(0.0, (len - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(len - 1);
        (i0, i1, s - i0 as f64)
    };
    let xs: Vec<_> = (0..width).map(|x| taps(x, fx, sw)).collect();
    let mut out = ImageBuffer::zeros(width, height);
    let data = src.data();
    for y in 0..height {
        let (y0, y1, ty) = taps(y, fy, sh);
        for (x, &(x0, x1, tx)) in xs.iter().enumerate() {
            let mut px = [0u8; 3];
            for (c, v) in px.iter_mut().enumerate() {
                let at = |xx: usize, yy: usize| f64::from(data[(yy * sw + xx) * CHANNELS + c]);
                let top = at(x0, y0) * (1.0 - tx) + at(x1, y0) * tx;
                let bot = at(x0, y1) * (1.0 - tx) + at(x1, y1) * tx;
                *v = (top * (1.0 - ty) + bot * ty).round().clamp(0.0, 255.0) as u8;
            }
            out.set(x, y, px);
        }
    }
    out
}

/// Scales the longest side to `side`, centers the result, and zero-fills
/// the remainder.
pub fn resize_pad(crop: &ImageBuffer, side: usize) -> (ImageBuffer, PadInfo) {
    let (w, h) = (crop.width(), crop.height());
    let scale = side as f64 / w.max(h) as f64;
    let fit = |len: usize| ((len as f64 * scale).round() as usize).clamp(1, side);
    let (cw, ch) = if w >= h { (side, fit(h)) } else { (fit(w), side) };
    let content = if (cw, ch) == (w, h) {
        crop.clone()
    } else {
        resize_bilinear(crop, cw, ch)
    };
    let offset_x = (side - cw) / 2;
    let offset_y = (side - ch) / 2;
    let mut out = ImageBuffer::zeros(side, side);
    for y in 0..ch {
        let src = &content.data()[y * cw * CHANNELS..(y + 1) * cw * CHANNELS];
        let start = ((y + offset_y) * side + offset_x) * CHANNELS;
        out.data_mut()[start..start + cw * CHANNELS].copy_from_slice(src);
    }
    let info = PadInfo {
        scale,
        source_width: w,
        source_height: h,
        content_width: cw,
        content_height: ch,
        offset_x,
        offset_y,
    };
    (out, info)
}
