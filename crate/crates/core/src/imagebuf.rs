use crate::error::{Error, Result};
use crate::math::Vec3;

/// Row-major RGB float image; also used for image-space gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuffer {
    pub width: usize,
    pub height: usize,
    /// `width * height * 3` interleaved channels.
    pub rgb: Vec<f64>,
    /// Accumulated opacity per pixel, when produced by the rasterizer.
    pub alpha: Option<Vec<f64>>,
}

impl ImageBuffer {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            rgb: vec![0.0; width * height * 3],
            alpha: None,
        }
    }

    pub fn filled(width: usize, height: usize, color: Vec3) -> Self {
        let mut img = Self::new(width, height);
        for px in img.rgb.chunks_exact_mut(3) {
            px.copy_from_slice(color.as_slice());
        }
        img
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn pixel(&self, x: usize, y: usize) -> Vec3 {
        let i = (y * self.width + x) * 3;
        Vec3::new(self.rgb[i], self.rgb[i + 1], self.rgb[i + 2])
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, c: Vec3) {
        let i = (y * self.width + x) * 3;
        self.rgb[i..i + 3].copy_from_slice(c.as_slice());
    }

    pub fn check_same_dims(&self, other: &ImageBuffer) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::DimensionMismatch {
                expected: self.dims(),
                got: other.dims(),
            });
        }
        Ok(())
    }

    pub fn mean_abs_diff(&self, other: &ImageBuffer) -> Result<f64> {
        self.check_same_dims(other)?;
        let sum: f64 = self
            .rgb
            .iter()
            .zip(&other.rgb)
            .map(|(a, b)| (a - b).abs())
            .sum();
        Ok(sum / self.rgb.len().max(1) as f64)
    }

    /// Converts to 8-bit with clamping to `[0, 1]`.
    pub fn to_rgb8(&self) -> Vec<u8> {
        self.rgb
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    pub fn from_rgb8(width: usize, height: usize, data: &[u8]) -> Self {
        Self {
            width,
            height,
            rgb: data.iter().map(|&v| v as f64 / 255.0).collect(),
            alpha: None,
        }
    }
}
