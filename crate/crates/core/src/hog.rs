//! Histogram of oriented gradients over a grayscale image.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HogConfig {
    /// Cell side in pixels.
    pub cell: usize,
    /// Block side in cells; blocks advance by one cell.
    pub block: usize,
    /// Unsigned orientation bins over `[0, pi)`.
    pub bins: usize,
    pub epsilon: f64,
}

impl Default for HogConfig {
    fn default() -> Self {
        Self {
            cell: 8,
            block: 2,
            bins: 9,
            epsilon: 1e-5,
        }
    }
}

impl HogConfig {
    fn validate(&self) -> Result<()> {
        if self.cell == 0 || self.block == 0 || self.bins == 0 {
            return Err(Error::InvalidArgument("HOG cell, block and bins must be >= 1".into()));
        }
        Ok(())
    }

    /// Descriptor length for a `width` x `height` image.
    pub fn descriptor_len(&self, width: usize, height: usize) -> Result<usize> {
        self.validate()?;
        let (cx, cy) = (width / self.cell, height / self.cell);
        if cx < self.block || cy < self.block {
            return Err(Error::InvalidShape(format!(
                "image {width}x{height} is smaller than one {0}x{0}-cell block of {1}px cells",
                self.block, self.cell
            )));
        }
        Ok((cx - self.block + 1) * (cy - self.block + 1) * self.block * self.block * self.bins)
    }
}

/// Per-cell orientation histograms, `[cell_y][cell_x][bin]` flattened.
fn cell_histograms(image: &[f64], width: usize, height: usize, cfg: &HogConfig) -> Vec<f64> {
    let (cx, cy) = (width / cfg.cell, height / cfg.cell);
    let mut hist = vec![0.0; cx * cy * cfg.bins];
    let px = |x: usize, y: usize| image[y * width + x];
    let bin_width = core::f64::consts::PI / cfg.bins as f64;
    for y in 0..cy * cfg.cell {
        for x in 0..cx * cfg.cell {
            // centered differences, replicated borders
            let gx = px((x + 1).min(width - 1), y) - px(x.saturating_sub(1), y);
            let gy = px(x, (y + 1).min(height - 1)) - px(x, y.saturating_sub(1));
            let mag = libm::sqrt(gx * gx + gy * gy);
            if mag == 0.0 {
                continue;
            }
            let mut theta = libm::atan2(gy, gx);
            if theta < 0.0 {
                theta += core::f64::consts::PI;
            }
            // bin i is centred on orientation i * pi / bins
            let pos = theta / bin_width;
            let lower = libm::floor(pos);
            let frac = pos - lower;
            let lo = (lower as usize) % cfg.bins;
            let hi = (lo + 1) % cfg.bins;
            let base = ((y / cfg.cell) * cx + x / cfg.cell) * cfg.bins;
            hist[base + lo] += mag * (1.0 - frac);
            hist[base + hi] += mag * frac;
        }
    }
    hist
}

/// HOG descriptor of a row-major grayscale image: unsigned orientation
/// histograms per cell, concatenated per block and L2-normalized as
/// `v / sqrt(||v||² + eps²)`.
pub fn compute_hog(image: &[f64], width: usize, height: usize, cfg: &HogConfig) -> Result<Vec<f64>> {
    if image.len() != width * height {
        return Err(Error::ShapeMismatch {
            axis: "image pixels",
            expected: width * height,
            actual: image.len(),
        });
    }
    let len = cfg.descriptor_len(width, height)?;
    let hist = cell_histograms(image, width, height, cfg);
    let (cx, cy) = (width / cfg.cell, height / cfg.cell);
    let mut out = Vec::with_capacity(len);
    let mut block = Vec::with_capacity(cfg.block * cfg.block * cfg.bins);
    for by in 0..=cy - cfg.block {
        for bx in 0..=cx - cfg.block {
            block.clear();
            for dy in 0..cfg.block {
                for dx in 0..cfg.block {
                    let base = ((by + dy) * cx + bx + dx) * cfg.bins;
                    block.extend_from_slice(&hist[base..base + cfg.bins]);
                }
            }
            let norm = libm::sqrt(block.iter().map(|v| v * v).sum::<f64>() + cfg.epsilon * cfg.epsilon);
            out.extend(block.iter().map(|v| v / norm));
        }
    }
    debug_assert_eq!(out.len(), len);
    Ok(out)
}
