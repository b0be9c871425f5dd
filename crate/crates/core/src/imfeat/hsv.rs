use crate::error::{Error, Result};
use crate::geometry::{ClassId, FIRE, SMOKE};
use crate::ingest::ImageBuffer;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HsvPixel {
    /// Degrees in `[0, 360)`.
    pub h: f64,
    pub s: f64,
    pub v: f64,
}

/// Hexcone conversion. Achromatic pixels get hue 0.
pub fn rgb_to_hsv(rgb: [u8; 3]) -> HsvPixel {
    let [r, g, b] = rgb.map(|c| f64::from(c) / 255.0);
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let v = max;
    let s = if max > 0.0 { delta / max } else { 0.0 };
    if delta == 0.0 {
        return HsvPixel { h: 0.0, s, v };
    }
    let mut h = if max == r {
        60.0 * ((g - b) / delta)
    } else if max == g {
        60.0 * ((b - r) / delta + 2.0)
    } else {
        60.0 * ((r - g) / delta + 4.0)
    };
    if h < 0.0 {
        h += 360.0;
    }
    if h >= 360.0 {
        h -= 360.0;
    }
    HsvPixel { h, s, v }
}

/// Saturated red-orange: hue in `[0, 50] ∪ [340, 360)`, `s >= 0.4`, `v >= 0.5`.
pub fn is_fire_colored(p: &HsvPixel) -> bool {
    (p.h <= 50.0 || p.h >= 340.0) && p.s >= 0.4 && p.v >= 0.5
}

/// Washed-out mid-tone: `s <= 0.3`, `v` in `[0.3, 0.9]`.
pub fn is_smoke_colored(p: &HsvPixel) -> bool {
    p.s <= 0.3 && (0.3..=0.9).contains(&p.v)
}

/// Fraction of crop pixels passing the class's color predicate.
pub fn color_score(crop: &ImageBuffer, class_id: ClassId) -> Result<f64> {
    let pred: fn(&HsvPixel) -> bool = match class_id {
        FIRE => is_fire_colored,
        SMOKE => is_smoke_colored,
        other => return Err(Error::UnknownClass(other)),
    };
    if crop.pixels.is_empty() {
        return Ok(0.0);
    }
    let hits = crop
        .pixels
        .iter()
        .filter(|&&p| pred(&rgb_to_hsv(p)))
        .count();
    Ok(hits as f64 / crop.pixels.len() as f64)
}
