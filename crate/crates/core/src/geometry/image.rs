use std::path::Path;

use image::ImageEncoder;

use crate::artifact::write_atomic;
use crate::error::{Error, Result};

/// 8-bit RGB image, row-major, interleaved channels.
#[derive(Clone, PartialEq, Eq)]
pub struct ImageBuffer {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl std::fmt::Debug for ImageBuffer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "ImageBuffer({}x{})", self.width, self.height)
    }
}

pub const CHANNELS: usize = 3;

impl ImageBuffer {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidImage(format!("zero-sized image {width}x{height}")));
        }
        if data.len() != width * height * CHANNELS {
            return Err(Error::InvalidImage(format!(
                "{width}x{height} RGB image needs {} bytes, got {}",
                width * height * CHANNELS,
                data.len()
            )));
        }
        Ok(ImageBuffer { width, height, data })
    }

    /// All-black image. Panics on zero dimensions.
    pub fn zeros(width: usize, height: usize) -> Self {
        assert!(width > 0 && height > 0, "zero-sized image");
        ImageBuffer {
            width,
            height,
            data: vec![0; width * height * CHANNELS],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [u8; 3]) -> Self {
        let mut img = Self::zeros(width, height);
        for y in 0..height {
            for x in 0..width {
                img.set(x, y, f(x, y));
            }
        }
        img
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * CHANNELS;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, px: [u8; 3]) {
        let i = (y * self.width + x) * CHANNELS;
        self.data[i..i + CHANNELS].copy_from_slice(&px);
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| Error::ImageCodec {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let rgb = img.to_rgb8();
        let (w, h) = rgb.dimensions();
        ImageBuffer::new(w as usize, h as usize, rgb.into_raw())
    }

    /// Encodes as PNG and writes atomically, creating parent directories.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.encode_png(path)?)
    }

    pub fn encode_png(&self, path: &Path) -> Result<Vec<u8>> {
        let mut bytes = Vec::new();
        image::codecs::png::PngEncoder::new(&mut bytes)
            .write_image(&self.data, self.width as u32, self.height as u32, image::ExtendedColorType::Rgb8)
            .map_err(|e| Error::ImageCodec {
                path: path.to_path_buf(),
                message: e.to_string(),
            })?;
        Ok(bytes)
    }

    /// Places images side by side, top-aligned, over a black background.
    pub fn hconcat(parts: &[&ImageBuffer]) -> ImageBuffer {
        assert!(!parts.is_empty());
        let width = parts.iter().map(|p| p.width).sum();
        let height = parts.iter().map(|p| p.height).max().unwrap();
        let mut out = ImageBuffer::zeros(width, height);
        let mut x0 = 0;
        for p in parts {
            for y in 0..p.height {
                let src = &p.data[y * p.width * CHANNELS..(y + 1) * p.width * CHANNELS];
                let start = (y * width + x0) * CHANNELS;
                out.data[start..start + src.len()].copy_from_slice(src);
            }
            x0 += p.width;
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_dimensions() {
        assert!(ImageBuffer::new(0, 3, vec![]).is_err());
        assert!(ImageBuffer::new(2, 2, vec![0; 11]).is_err());
        assert!(ImageBuffer::new(2, 2, vec![0; 12]).is_ok());
    }

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let img = ImageBuffer::from_fn(5, 3, |x, y| [x as u8 * 40, y as u8 * 80, 7]);
        let path = dir.path().join("a.png");
        img.save_png(&path).unwrap();
        assert_eq!(ImageBuffer::load_png(&path).unwrap(), img);
    }

    #[test]
    fn hconcat_lays_out_left_to_right() {
        let a = ImageBuffer::from_fn(2, 2, |_, _| [1, 1, 1]);
        let b = ImageBuffer::from_fn(1, 3, |_, _| [2, 2, 2]);
        let c = ImageBuffer::hconcat(&[&a, &b]);
        assert_eq!((c.width(), c.height()), (3, 3));
        assert_eq!(c.get(1, 1), [1, 1, 1]);
        assert_eq!(c.get(0, 2), [0, 0, 0]);
        assert_eq!(c.get(2, 2), [2, 2, 2]);
    }
}
