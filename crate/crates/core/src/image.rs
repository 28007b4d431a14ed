//! Grayscale raster helpers: cropping, bilinear resampling and 8-bit
//! quantization.

use alloc::vec::Vec;

use crate::data::FaceBox;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Row-major single-channel image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 || pixels.len() != width * height {
            return Err(Error::ShapeMismatch {
                axis: "image pixels",
                expected: width * height,
                actual: pixels.len(),
            });
        }
        Ok(Self { width, height, pixels })
    }

    pub fn from_u8(width: usize, height: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(width, height, bytes.iter().map(|&b| b as f64 / 255.0).collect())
    }

    pub fn to_u8(&self) -> Vec<u8> {
        self.pixels.iter().map(|&v| quantize(v)).collect()
    }

    /// Round-trips the pixels through 8-bit storage.
    pub fn quantized(mut self) -> Self {
        self.pixels.iter_mut().for_each(|v| *v = quantize(*v) as f64 / 255.0);
        self
    }

    fn at(&self, x: isize, y: isize) -> f64 {
        let x = x.clamp(0, self.width as isize - 1) as usize;
        let y = y.clamp(0, self.height as isize - 1) as usize;
        self.pixels[y * self.width + x]
    }

    /// Bilinear resampling of the pixel rectangle `(x, y, w, h)` to a
    /// `size` x `size` crop. Samples outside the image replicate the border.
    pub fn crop_resize(&self, rect: (f64, f64, f64, f64), size: usize) -> Result<GrayImage> {
        let (x0, y0, w, h) = rect;
        if !(w > 0.0 && h > 0.0) || size == 0 {
            return Err(Error::InvalidArgument("crop rectangle must have positive area".into()));
        }
        let mut out = Vec::with_capacity(size * size);
        for oy in 0..size {
            let sy = y0 + (oy as f64 + 0.5) * h / size as f64 - 0.5;
            let fy = libm::floor(sy);
            let ty = sy - fy;
            for ox in 0..size {
                let sx = x0 + (ox as f64 + 0.5) * w / size as f64 - 0.5;
                let fx = libm::floor(sx);
                let tx = sx - fx;
                let (ix, iy) = (fx as isize, fy as isize);
                let top = self.at(ix, iy) * (1.0 - tx) + self.at(ix + 1, iy) * tx;
                let bottom = self.at(ix, iy + 1) * (1.0 - tx) + self.at(ix + 1, iy + 1) * tx;
                out.push(top * (1.0 - ty) + bottom * ty);
            }
        }
        GrayImage::new(size, size, out)
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(alloc::vec![1, self.height, self.width], self.pixels.clone()).expect("dimensions validated at construction")
    }
}

/// The network input for one face: the box region of `scene` resampled to
/// `size` x `size`.
pub fn crop_face(scene: &GrayImage, face: &FaceBox, size: usize) -> Result<Tensor> {
    let dims = (scene.width, scene.height);
    face.validate(dims)?;
    Ok(scene.crop_resize(face.pixel_rect(dims), size)?.to_tensor())
}

pub fn quantize(v: f64) -> u8 {
    libm::round(v.clamp(0.0, 1.0) * 255.0) as u8
}
