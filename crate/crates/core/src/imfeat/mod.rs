//! Region plausibility features: color, edge diffuseness and texture.
//!
//! All three scores are bounded in `[0, 1]` by construction, so no dataset
//! statistics are needed to normalize them:
//!
//! * color `s`: fraction of crop pixels passing the class's HSV predicate.
//! * edge `e`: `1 - min(1, edge_fraction / 0.5)` under Canny; high means diffuse.
//! * texture `t`: GLCM contrast scaled by `(L-1)^2` for fire, GLCM
//!   homogeneity for smoke.

pub mod canny;
pub mod glcm;
pub mod hsv;

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

pub use canny::{canny_edges, EdgeMap};
pub use glcm::{glcm, GlcmMatrix};
pub use hsv::{color_score, rgb_to_hsv, HsvPixel};

use crate::crn::FeatureVector;
use crate::error::{Error, Result};
use crate::geometry::{ClassId, Detection, FIRE, SMOKE};
use crate::ingest::ImageBuffer;
use crate::uncertainty::UncertaintyEstimate;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureConfig {
    pub canny_low: f64,
    pub canny_high: f64,
    /// Edge fraction at which the edge score bottoms out at 0.
    pub edge_saturation: f64,
    pub glcm_levels: usize,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            canny_low: canny::DEFAULT_LOW,
            canny_high: canny::DEFAULT_HIGH,
            edge_saturation: 0.5,
            glcm_levels: glcm::DEFAULT_LEVELS,
        }
    }
}

impl FeatureConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.canny_low > 0.0 && self.canny_high >= self.canny_low) {
            return Err(Error::Config(format!(
                "canny thresholds need high >= low > 0, got low={} high={}",
                self.canny_low, self.canny_high
            )));
        }
        if !(self.edge_saturation > 0.0) {
            return Err(Error::Config("edge_saturation must be positive".into()));
        }
        if self.glcm_levels < 2 {
            return Err(Error::Config("glcm_levels must be at least 2".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegionFeatures {
    pub color: f64,
    pub edge: f64,
    pub texture: f64,
}

impl RegionFeatures {
    pub fn new(color: f64, edge: f64, texture: f64) -> Result<Self> {
        for (name, v) in [("color", color), ("edge", edge), ("texture", texture)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Validation(format!(
                    "{name} score {v} outside [0, 1]"
                )));
            }
        }
        Ok(Self {
            color,
            edge,
            texture,
        })
    }
}

pub fn edge_fraction(crop: &ImageBuffer, cfg: &FeatureConfig) -> f64 {
    canny_edges(crop, cfg.canny_low, cfg.canny_high).fraction()
}

pub fn edge_score_with(crop: &ImageBuffer, cfg: &FeatureConfig) -> f64 {
    1.0 - (edge_fraction(crop, cfg) / cfg.edge_saturation).min(1.0)
}

/// Edge score with the default Canny thresholds (40 / 100).
pub fn edge_score(crop: &ImageBuffer) -> f64 {
    edge_score_with(crop, &FeatureConfig::default())
}

pub fn texture_score_with(crop: &ImageBuffer, class_id: ClassId, levels: usize) -> Result<f64> {
    if class_id != FIRE && class_id != SMOKE {
        return Err(Error::UnknownClass(class_id));
    }
    let m = glcm(crop, levels, &glcm::DEFAULT_OFFSETS)?;
    Ok(if class_id == FIRE {
        let max = ((levels - 1) * (levels - 1)) as f64;
        (m.contrast() / max).min(1.0)
    } else {
        m.homogeneity().clamp(0.0, 1.0)
    })
}

pub fn texture_score(crop: &ImageBuffer, class_id: ClassId) -> Result<f64> {
    texture_score_with(crop, class_id, glcm::DEFAULT_LEVELS)
}

pub fn region_features(
    crop: &ImageBuffer,
    class_id: ClassId,
    cfg: &FeatureConfig,
) -> Result<RegionFeatures> {
    RegionFeatures::new(
        color_score(crop, class_id)?,
        edge_score_with(crop, cfg),
        texture_score_with(crop, class_id, cfg.glcm_levels)?,
    )
}

/// Assembles `[c, var, s, e, t]`.
pub fn build_feature_vector(
    detection: &Detection,
    unc: &UncertaintyEstimate,
    feats: &RegionFeatures,
) -> Result<FeatureVector> {
    FeatureVector::new([
        detection.confidence,
        unc.variance,
        feats.color,
        feats.edge,
        feats.texture,
    ])
}

// ---------------------------------------------------------------------------
// Feature CSV: `image_id,det_index,class,c,var,s,e,t[,label]`

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureRow {
    pub image_id: String,
    pub det_index: usize,
    pub class: ClassId,
    pub c: f64,
    pub var: f64,
    pub s: f64,
    pub e: f64,
    pub t: f64,
    #[serde(default)]
    pub label: Option<u8>,
}

impl FeatureRow {
    pub fn features(&self) -> Result<FeatureVector> {
        FeatureVector::new([self.c, self.var, self.s, self.e, self.t])
    }
}

const CSV_COLUMNS: [&str; 8] = ["image_id", "det_index", "class", "c", "var", "s", "e", "t"];

/// Writes the feature table. The `label` column is emitted only when every
/// row carries a label.
pub fn write_feature_csv<W: Write>(out: W, rows: &[FeatureRow]) -> Result<()> {
    let labeled = !rows.is_empty() && rows.iter().all(|r| r.label.is_some());
    let mut w = csv::Writer::from_writer(out);
    let csv_err = |e: csv::Error| Error::Validation(format!("feature csv: {e}"));
    let mut header: Vec<&str> = CSV_COLUMNS.to_vec();
    if labeled {
        header.push("label");
    }
    w.write_record(&header).map_err(csv_err)?;
    for r in rows {
        let mut rec = vec![
            r.image_id.clone(),
            r.det_index.to_string(),
            r.class.to_string(),
            r.c.to_string(),
            r.var.to_string(),
            r.s.to_string(),
            r.e.to_string(),
            r.t.to_string(),
        ];
        if labeled {
            rec.push(r.label.unwrap_or(0).to_string());
        }
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush()
        .map_err(|e| Error::Validation(format!("feature csv: {e}")))
}

pub fn read_feature_csv<R: Read>(input: R) -> Result<Vec<FeatureRow>> {
    let mut rdr = csv::Reader::from_reader(input);
    let headers = rdr
        .headers()
        .map_err(|e| Error::Validation(format!("feature csv: {e}")))?
        .clone();
    let names: Vec<&str> = headers.iter().collect();
    if names.get(..8) != Some(&CSV_COLUMNS[..])
        || names.len() > 9
        || (names.len() == 9 && names[8] != "label")
    {
        return Err(Error::Validation(format!(
            "feature csv header {names:?} does not match {CSV_COLUMNS:?}[,label]"
        )));
    }
    let mut rows = Vec::new();
    for (i, rec) in rdr.deserialize().enumerate() {
        let row: FeatureRow = rec.map_err(|e| Error::Parse {
            path: "<features>".into(),
            line: i + 2,
            message: e.to_string(),
        })?;
        if let Some(l) = row.label {
            if l > 1 {
                return Err(Error::Validation(format!(
                    "row {}: label {l} not 0/1",
                    i + 2
                )));
            }
        }
        row.features()
            .map_err(|e| Error::Validation(format!("row {}: {e}", i + 2)))?;
        rows.push(row);
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::canny::fixtures::{checkerboard, half_black_white};
    use super::*;
    use crate::geometry::BoundingBox;
    use crate::rng::Rng;

    #[test]
    fn constant_crop_fixtures() {
        for rgb in [[0, 0, 0], [128, 128, 128], [255, 60, 0], [255, 255, 255]] {
            let c = ImageBuffer::filled(9, 7, rgb);
            assert_eq!(edge_score(&c), 1.0);
            assert_eq!(texture_score(&c, SMOKE).unwrap(), 1.0);
            assert_eq!(texture_score(&c, FIRE).unwrap(), 0.0);
        }
    }

    #[test]
    fn checkerboard_saturates_edge_score() {
        // Single-pixel cells are averaged away by the blur before Sobel sees them.
        assert_eq!(
            edge_fraction(&checkerboard(32, 1), &FeatureConfig::default()),
            0.0
        );
        let board = checkerboard(32, 4);
        let frac = edge_fraction(&board, &FeatureConfig::default());
        assert!(frac >= 0.5, "edge fraction {frac}");
        assert_eq!(edge_score(&board), 0.0);
    }

    #[test]
    fn step_edge_gives_intermediate_edge_score() {
        let img = half_black_white(16);
        let edges = canny_edges(&img, 40.0, 100.0).count();
        let expected = 1.0 - (edges as f64 / 256.0 / 0.5).min(1.0);
        let e = edge_score(&img);
        assert_eq!(e, expected);
        assert!(e > 0.0 && e < 1.0, "{e}");
    }

    #[test]
    fn two_pixel_fire_texture() {
        let img = ImageBuffer::new(2, 1, vec![[0, 0, 0], [255, 255, 255]]).unwrap();
        // With the default offsets only (1, 0) fits in a 2x1 crop.
        assert_eq!(texture_score(&img, FIRE).unwrap(), 1.0);
        assert!(texture_score(&img, 5).is_err());
    }

    #[test]
    fn feature_vector_order() {
        let d = Detection::new(BoundingBox::new(0., 0., 1., 1.).unwrap(), FIRE, 0.9).unwrap();
        let u = UncertaintyEstimate {
            mean_confidence: 0.9,
            variance: 0.0,
            matched_passes: 1,
        };
        let f = build_feature_vector(&d, &u, &RegionFeatures::new(1.0, 1.0, 0.0).unwrap()).unwrap();
        assert_eq!(f.values(), [0.9, 0.0, 1.0, 1.0, 0.0]);
        let d = Detection {
            confidence: 0.8,
            ..d
        };
        let u = UncertaintyEstimate {
            variance: 0.016,
            ..u
        };
        let f = build_feature_vector(&d, &u, &RegionFeatures::new(0.7, 0.5, 0.3).unwrap()).unwrap();
        assert_eq!(f.values(), [0.8, 0.016, 0.7, 0.5, 0.3]);
        assert!(RegionFeatures::new(1.2, 0.5, 0.5).is_err());
    }

    #[test]
    fn fuzzed_crops_stay_in_bounds() {
        let mut rng = Rng::new(99);
        let cfg = FeatureConfig::default();
        for _ in 0..300 {
            let w = 1 + rng.below(20) as u32;
            let h = 1 + rng.below(20) as u32;
            let pixels = (0..w * h)
                .map(|_| {
                    [
                        rng.below(256) as u8,
                        rng.below(256) as u8,
                        rng.below(256) as u8,
                    ]
                })
                .collect();
            let crop = ImageBuffer::new(w, h, pixels).unwrap();
            for class in [SMOKE, FIRE] {
                region_features(&crop, class, &cfg).unwrap();
            }
        }
    }

    #[test]
    fn csv_round_trip_with_and_without_labels() {
        let mut rows = vec![
            FeatureRow {
                image_id: "a".into(),
                det_index: 0,
                class: 1,
                c: 0.1 + 0.2,
                var: 1e-17,
                s: 1.0,
                e: 0.0,
                t: 0.333,
                label: Some(1),
            },
            FeatureRow {
                image_id: "b,with comma".into(),
                det_index: 3,
                class: 0,
                c: 0.5,
                var: 0.25,
                s: 0.0,
                e: 1.0,
                t: 0.9,
                label: Some(0),
            },
        ];
        let mut buf = Vec::new();
        write_feature_csv(&mut buf, &rows).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("image_id,det_index,class,c,var,s,e,t,label\n"));
        assert_eq!(read_feature_csv(&buf[..]).unwrap(), rows);

        for r in &mut rows {
            r.label = None;
        }
        let mut buf = Vec::new();
        write_feature_csv(&mut buf, &rows).unwrap();
        assert!(String::from_utf8(buf.clone())
            .unwrap()
            .starts_with("image_id,det_index,class,c,var,s,e,t\n"));
        assert_eq!(read_feature_csv(&buf[..]).unwrap(), rows);
    }

    #[test]
    fn csv_rejects_bad_header_and_values() {
        assert!(read_feature_csv("a,b,c\n".as_bytes()).is_err());
        let bad = "image_id,det_index,class,c,var,s,e,t\nx,0,1,1.5,0,0,0,0\n";
        assert!(read_feature_csv(bad.as_bytes()).is_err());
    }
}
