//! Classical Canny edge detector on 8-bit luma.
//!
//! Pipeline: luma conversion, 5x5 Gaussian blur (sigma 1.4), 3x3 Sobel
//! gradients, non-maximum suppression along the gradient direction quantized
//! to four orientations, then double-threshold hysteresis with 8-connectivity.
//! Borders are handled by edge replication. Gradient magnitudes are divided
//! by 4 so thresholds live on the 8-bit intensity scale.

use crate::ingest::ImageBuffer;

pub const DEFAULT_LOW: f64 = 40.0;
pub const DEFAULT_HIGH: f64 = 100.0;
pub const BLUR_SIGMA: f64 = 1.4;
const BLUR_RADIUS: isize = 2;
const MAGNITUDE_SCALE: f64 = 0.25;

/// Single-channel f64 raster.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl GrayImage {
    fn at_clamped(&self, x: isize, y: isize) -> f64 {
        let x = x.clamp(0, self.width as isize - 1) as usize;
        let y = y.clamp(0, self.height as isize - 1) as usize;
        self.data[y * self.width + x]
    }
}

/// Binary edge map, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EdgeMap {
    pub width: usize,
    pub height: usize,
    pub edges: Vec<bool>,
}

impl EdgeMap {
    pub fn count(&self) -> usize {
        self.edges.iter().filter(|&&e| e).count()
    }

    pub fn fraction(&self) -> f64 {
        if self.edges.is_empty() {
            0.0
        } else {
            self.count() as f64 / self.edges.len() as f64
        }
    }

    pub fn is_edge(&self, x: usize, y: usize) -> bool {
        self.edges[y * self.width + x]
    }
}

pub fn luma(p: [u8; 3]) -> f64 {
    0.299 * f64::from(p[0]) + 0.587 * f64::from(p[1]) + 0.114 * f64::from(p[2])
}

pub fn to_gray(img: &ImageBuffer) -> GrayImage {
    GrayImage {
        width: img.width as usize,
        height: img.height as usize,
        data: img.pixels.iter().map(|&p| luma(p)).collect(),
    }
}

fn gaussian_kernel() -> [f64; 5] {
    let mut k = [0.0; 5];
    for (i, w) in k.iter_mut().enumerate() {
        let x = i as f64 - BLUR_RADIUS as f64;
        *w = (-x * x / (2.0 * BLUR_SIGMA * BLUR_SIGMA)).exp();
    }
    let sum: f64 = k.iter().sum();
    k.map(|w| w / sum)
}

/// Separable 5x5 Gaussian blur.
pub fn gaussian_blur(img: &GrayImage) -> GrayImage {
    let k = gaussian_kernel();
    let (w, h) = (img.width, img.height);
    let mut tmp = GrayImage {
        width: w,
        height: h,
        data: vec![0.0; w * h],
    };
    for y in 0..h {
        for x in 0..w {
            tmp.data[y * w + x] = (-BLUR_RADIUS..=BLUR_RADIUS)
                .map(|d| k[(d + BLUR_RADIUS) as usize] * img.at_clamped(x as isize + d, y as isize))
                .sum();
        }
    }
    let mut out = tmp.clone();
    for y in 0..h {
        for x in 0..w {
            out.data[y * w + x] = (-BLUR_RADIUS..=BLUR_RADIUS)
                .map(|d| k[(d + BLUR_RADIUS) as usize] * tmp.at_clamped(x as isize, y as isize + d))
                .sum();
        }
    }
    out
}

/// Sobel gradients `(gx, gy)` of an already blurred image.
pub fn sobel(img: &GrayImage) -> (Vec<f64>, Vec<f64>) {
    let (w, h) = (img.width, img.height);
    let mut gx = vec![0.0; w * h];
    let mut gy = vec![0.0; w * h];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let p = |dx: isize, dy: isize| img.at_clamped(x + dx, y + dy);
            let i = y as usize * w + x as usize;
            gx[i] = (p(1, -1) + 2.0 * p(1, 0) + p(1, 1)) - (p(-1, -1) + 2.0 * p(-1, 0) + p(-1, 1));
            gy[i] = (p(-1, 1) + 2.0 * p(0, 1) + p(1, 1)) - (p(-1, -1) + 2.0 * p(0, -1) + p(1, -1));
        }
    }
    (gx, gy)
}

/// Scaled gradient magnitude after blurring, the quantity the thresholds apply to.
pub fn gradient_magnitude(img: &ImageBuffer) -> GrayImage {
    let blurred = gaussian_blur(&to_gray(img));
    let (gx, gy) = sobel(&blurred);
    GrayImage {
        width: blurred.width,
        height: blurred.height,
        data: gx
            .iter()
            .zip(&gy)
            .map(|(a, b)| a.hypot(*b) * MAGNITUDE_SCALE)
            .collect(),
    }
}

pub fn canny_edges(img: &ImageBuffer, low: f64, high: f64) -> EdgeMap {
    let blurred = gaussian_blur(&to_gray(img));
    let (w, h) = (blurred.width, blurred.height);
    let (gx, gy) = sobel(&blurred);
    let mag: Vec<f64> = gx
        .iter()
        .zip(&gy)
        .map(|(a, b)| a.hypot(*b) * MAGNITUDE_SCALE)
        .collect();
    let at = |x: isize, y: isize| -> f64 {
        if x < 0 || y < 0 || x >= w as isize || y >= h as isize {
            0.0
        } else {
            mag[y as usize * w + x as usize]
        }
    };

    // Thin ridges: keep local maxima across the edge.
    let mut candidate = vec![false; w * h];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let m = mag[i];
            if m <= low {
                continue;
            }
            let mut angle = gy[i].atan2(gx[i]).to_degrees();
            if angle < 0.0 {
                angle += 180.0;
            }
            // Image y grows downward, so a 45 degree gradient points to (+1, +1).
            let (dx, dy) = if !(22.5..157.5).contains(&angle) {
                (1, 0)
            } else if angle < 67.5 {
                (1, 1)
            } else if angle < 112.5 {
                (0, 1)
            } else {
                (-1, 1)
            };
            let (xi, yi) = (x as isize, y as isize);
            if m >= at(xi + dx, yi + dy) && m >= at(xi - dx, yi - dy) {
                candidate[i] = true;
            }
        }
    }

    // Hysteresis: grow from strong pixels through weak candidates.
    let mut edges = vec![false; w * h];
    let mut stack: Vec<usize> = (0..w * h)
        .filter(|&i| candidate[i] && mag[i] >= high)
        .collect();
    for &i in &stack {
        edges[i] = true;
    }
    while let Some(i) = stack.pop() {
        let (x, y) = ((i % w) as isize, (i / w) as isize);
        for dy in -1..=1 {
            for dx in -1..=1 {
                let (nx, ny) = (x + dx, y + dy);
                if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                    continue;
                }
                let j = ny as usize * w + nx as usize;
                if candidate[j] && !edges[j] {
                    edges[j] = true;
                    stack.push(j);
                }
            }
        }
    }
    EdgeMap {
        width: w,
        height: h,
        edges,
    }
}
