//! Gray-level co-occurrence matrices and the two Haralick statistics we use.

use super::canny::luma;
use crate::error::{Error, Result};
use crate::ingest::ImageBuffer;

pub const DEFAULT_LEVELS: usize = 8;
pub const DEFAULT_OFFSETS: [(i32, i32); 4] = [(1, 0), (0, 1), (1, 1), (1, -1)];

#[derive(Debug, Clone, PartialEq)]
pub struct GlcmMatrix {
    pub levels: usize,
    /// Row-major `levels x levels` pair counts, accumulated symmetrically.
    pub counts: Vec<u64>,
    /// `counts` divided by their total; sums to one.
    pub normalized: Vec<f64>,
    /// No offset fit inside the crop; `normalized` is uniform.
    pub fallback: bool,
}

impl GlcmMatrix {
    pub fn p(&self, i: usize, j: usize) -> f64 {
        self.normalized[i * self.levels + j]
    }

    pub fn count(&self, i: usize, j: usize) -> u64 {
        self.counts[i * self.levels + j]
    }

    /// `sum p(i,j) (i-j)^2`
    pub fn contrast(&self) -> f64 {
        self.fold(|d| d * d)
    }

    /// `sum p(i,j) / (1 + (i-j)^2)`
    pub fn homogeneity(&self) -> f64 {
        self.fold(|d| 1.0 / (1.0 + d * d))
    }

    fn fold(&self, weight: impl Fn(f64) -> f64) -> f64 {
        let l = self.levels;
        let mut acc = 0.0;
        for i in 0..l {
            for j in 0..l {
                acc += self.normalized[i * l + j] * weight(i as f64 - j as f64);
            }
        }
        acc
    }
}

/// Uniform quantization of luma in `[0, 255]` into `levels` bins.
pub fn quantize(gray: f64, levels: usize) -> usize {
    let bin = (gray * levels as f64 / 256.0).floor();
    (bin.max(0.0) as usize).min(levels - 1)
}

/// Builds the co-occurrence matrix of quantized luma. Each in-bounds pair
/// `(p, p + offset)` is counted in both directions.
pub fn glcm(crop: &ImageBuffer, levels: usize, offsets: &[(i32, i32)]) -> Result<GlcmMatrix> {
    if levels < 2 {
        return Err(Error::Contract(format!(
            "GLCM needs at least 2 levels, got {levels}"
        )));
    }
    let w = crop.width as i64;
    let h = crop.height as i64;
    let bins: Vec<usize> = crop
        .pixels
        .iter()
        .map(|&p| quantize(luma(p), levels))
        .collect();
    let mut counts = vec![0u64; levels * levels];
    for &(dx, dy) in offsets {
        let (dx, dy) = (i64::from(dx), i64::from(dy));
        for y in 0..h {
            let ny = y + dy;
            if ny < 0 || ny >= h {
                continue;
            }
            for x in 0..w {
                let nx = x + dx;
                if nx < 0 || nx >= w {
                    continue;
                }
                let a = bins[(y * w + x) as usize];
                let b = bins[(ny * w + nx) as usize];
                counts[a * levels + b] += 1;
                counts[b * levels + a] += 1;
            }
        }
    }
    let total: u64 = counts.iter().sum();
    let (normalized, fallback) = if total == 0 {
        (vec![1.0 / (levels * levels) as f64; levels * levels], true)
    } else {
        (
            counts.iter().map(|&c| c as f64 / total as f64).collect(),
            false,
        )
    };
    Ok(GlcmMatrix {
        levels,
        counts,
        normalized,
        fallback,
    })
}
