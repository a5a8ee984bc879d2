//! Raster container and resampling primitives used by every other module.
//!
//! Pixel values are stored as `f32` in the semantic range `[0, 1]`; 8-bit
//! quantization happens only at file boundaries. Values may leave `[0, 1]`
//! transiently inside arithmetic and are clamped before encoding.

mod io;
mod resample;

pub use io::{load_image, save_image};
pub use resample::{resize_bicubic, sample_bilinear, warp_bilinear};

use crate::error::{Error, Result};

/// H×W×C raster, row-major `[y][x][c]`, channel values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuffer {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl ImageBuffer {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        assert!(channels == 1 || channels == 3, "channels must be 1 or 3");
        ImageBuffer {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    pub fn constant(width: usize, height: usize, channels: usize, value: f32) -> Self {
        let mut img = Self::new(width, height, channels);
        img.data.fill(value);
        img
    }

    /// Build from a per-pixel closure `(x, y, c) -> value`.
    pub fn from_fn(
        width: usize,
        height: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Self {
        let mut img = Self::new(width, height, channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    img.data[(y * width + x) * channels + c] = f(x, y, c);
                }
            }
        }
        img
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f32) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    /// Edge-clamped fetch; indices may be out of range.
    #[inline]
    pub fn get_clamped(&self, x: isize, y: isize, c: usize) -> f32 {
        let xc = x.clamp(0, self.width as isize - 1) as usize;
        let yc = y.clamp(0, self.height as isize - 1) as usize;
        self.get(xc, yc, c)
    }

    pub fn same_shape(&self, other: &ImageBuffer) -> bool {
        self.width == other.width
            && self.height == other.height
            && self.channels == other.channels
    }

    pub fn crop(&self, rect: Rect) -> Result<ImageBuffer> {
        rect.check_inside(self.width, self.height)?;
        let mut out = ImageBuffer::new(rect.w, rect.h, self.channels);
        for y in 0..rect.h {
            let src = ((rect.y0 + y) * self.width + rect.x0) * self.channels;
            let dst = y * rect.w * self.channels;
            out.data[dst..dst + rect.w * self.channels]
                .copy_from_slice(&self.data[src..src + rect.w * self.channels]);
        }
        Ok(out)
    }

    /// ITU-R 601 luma; identity for single-channel images.
    pub fn to_luma(&self) -> ImageBuffer {
        if self.channels == 1 {
            return self.clone();
        }
        let mut out = ImageBuffer::new(self.width, self.height, 1);
        for i in 0..self.width * self.height {
            let r = self.data[i * 3];
            let g = self.data[i * 3 + 1];
            let b = self.data[i * 3 + 2];
            out.data[i] = 0.299 * r + 0.587 * g + 0.114 * b;
        }
        out
    }

    pub fn clamp_unit(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    /// Grow to at least `(min_w, min_h)` by mirror reflection on the right and
    /// bottom edges. Returns `self` unchanged if already large enough.
    pub fn reflect_pad_to(&self, min_w: usize, min_h: usize) -> ImageBuffer {
        if self.width >= min_w && self.height >= min_h {
            return self.clone();
        }
        let w = self.width.max(min_w);
        let h = self.height.max(min_h);
        let mut out = ImageBuffer::new(w, h, self.channels);
        for y in 0..h {
            let sy = reflect_index(y, self.height);
            for x in 0..w {
                let sx = reflect_index(x, self.width);
                for c in 0..self.channels {
                    out.set(x, y, c, self.get(sx, sy, c));
                }
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::InvalidArgument(format!(
                "channels must be 1 or 3, got {}",
                self.channels
            )));
        }
        if self.data.len() != self.height * self.width * self.channels {
            return Err(Error::DimensionMismatch(format!(
                "data length {} != {}x{}x{}",
                self.data.len(),
                self.height,
                self.width,
                self.channels
            )));
        }
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite pixel value".into()));
        }
        Ok(())
    }
}

/// Mirror an index into `[0, n)` (symmetric reflection, edge repeated).
#[inline]
pub(crate) fn reflect_index(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * n;
    let m = i % period;
    if m < n {
        m
    } else {
        period - 1 - m
    }
}

/// Axis-aligned pixel rectangle: offsets plus extents.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rect {
    pub x0: usize,
    pub y0: usize,
    pub w: usize,
    pub h: usize,
}

impl Rect {
    pub fn new(x0: usize, y0: usize, w: usize, h: usize) -> Self {
        assert!(w > 0 && h > 0, "rect extents must be positive");
        Rect { x0, y0, w, h }
    }

    pub fn check_inside(&self, width: usize, height: usize) -> Result<()> {
        if self.w == 0 || self.h == 0 {
            return Err(Error::InvalidArgument("empty rect".into()));
        }
        if self.x0 + self.w > width || self.y0 + self.h > height {
            return Err(Error::DimensionMismatch(format!(
                "rect ({},{} {}x{}) outside image {}x{}",
                self.x0, self.y0, self.w, self.h, width, height
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn crop_extracts_expected_pixels() {
        let img = ImageBuffer::from_fn(4, 3, 1, |x, y, _| (y * 4 + x) as f32 / 12.0);
        let c = img.crop(Rect::new(1, 1, 2, 2)).unwrap();
        assert_eq!(c.width, 2);
        assert_eq!(c.height, 2);
        assert_eq!(c.get(0, 0, 0), img.get(1, 1, 0));
        assert_eq!(c.get(1, 1, 0), img.get(2, 2, 0));
    }

    #[test]
    fn crop_outside_errors() {
        let img = ImageBuffer::new(4, 4, 1);
        assert!(img.crop(Rect::new(2, 2, 3, 3)).is_err());
    }

    #[test]
    fn reflect_pad_mirrors_edges() {
        let img = ImageBuffer::from_fn(3, 2, 1, |x, y, _| (y * 3 + x) as f32);
        let p = img.reflect_pad_to(5, 4);
        assert_eq!(p.width, 5);
        assert_eq!(p.height, 4);
        // Columns mirror: 0 1 2 | 2 1
        assert_eq!(p.get(3, 0, 0), img.get(2, 0, 0));
        assert_eq!(p.get(4, 0, 0), img.get(1, 0, 0));
        // Rows mirror: 0 1 | 1 0
        assert_eq!(p.get(0, 2, 0), img.get(0, 1, 0));
        assert_eq!(p.get(0, 3, 0), img.get(0, 0, 0));
    }

    #[test]
    fn luma_weights_sum_to_one() {
        let img = ImageBuffer::constant(2, 2, 3, 0.5);
        let l = img.to_luma();
        assert!((l.get(0, 0, 0) - 0.5).abs() < 1e-6);
    }
}
