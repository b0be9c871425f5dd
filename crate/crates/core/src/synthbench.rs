//! Seeded synthetic scenes: rendered fire and smoke blobs, look-alike
//! distractors, and simulated multi-pass detector output.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{clip_to_image, BoundingBox, ClassId, Detection, FIRE, SMOKE};
use crate::ingest::{
    default_classes, format_yolo_labels, save_ppm, write_detection_passes, Dataset, GroundTruthBox,
    ImageBuffer, Manifest, ManifestEntry, PassDetections,
};
use crate::rng::Rng;

const BACKGROUND: [f64; 3] = [22.0, 38.0, 30.0];
const FIRE_CORE: [f64; 3] = [255.0, 230.0, 120.0];
const FIRE_RIM: [f64; 3] = [230.0, 60.0, 0.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSpec {
    pub seed: u64,
    pub width: u32,
    pub height: u32,
    pub fire_blobs: u32,
    pub smoke_blobs: u32,
    pub distractors: u32,
    /// Object size range in pixels (box side).
    pub min_size: u32,
    pub max_size: u32,
    /// Checker cell size of the sharp-edged distractors.
    pub distractor_cell: u32,
    /// Detector passes per image, primary included.
    pub passes: u32,
    /// Box corner jitter (pixels, standard deviation).
    pub sigma_loc: f64,
    /// Per-pass confidence noise (standard deviation).
    pub sigma_conf: f64,
    /// Probability that a true object is missing from a non-primary pass.
    pub p_miss: f64,
    /// Probability that a true object is missing from the primary pass.
    pub primary_p_miss: f64,
    /// Probability that a false positive is missing from a non-primary pass.
    pub fp_p_miss: f64,
    /// Mean number of false positives per image.
    pub fp_rate: f64,
    /// Chance that a false positive lands on a distractor rather than background.
    pub fp_on_distractor: f64,
    /// Base confidence ranges for true objects and false positives.
    pub tp_conf: (f64, f64),
    pub fp_conf: (f64, f64),
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            width: 640,
            height: 480,
            fire_blobs: 2,
            smoke_blobs: 2,
            distractors: 3,
            min_size: 40,
            max_size: 110,
            distractor_cell: 4,
            passes: 5,
            sigma_loc: 2.0,
            sigma_conf: 0.05,
            p_miss: 0.2,
            primary_p_miss: 0.05,
            fp_p_miss: 0.6,
            fp_rate: 3.0,
            fp_on_distractor: 0.7,
            tp_conf: (0.3, 0.9),
            fp_conf: (0.3, 0.85),
        }
    }
}

impl SceneSpec {
    /// A noise-free detector: every object found in every pass at its exact box.
    pub fn noiseless() -> Self {
        Self {
            sigma_loc: 0.0,
            sigma_conf: 0.0,
            p_miss: 0.0,
            primary_p_miss: 0.0,
            fp_rate: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let prob = |name: &str, p: f64| {
            if (0.0..=1.0).contains(&p) {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} = {p} outside [0, 1]")))
            }
        };
        prob("p_miss", self.p_miss)?;
        prob("primary_p_miss", self.primary_p_miss)?;
        prob("fp_p_miss", self.fp_p_miss)?;
        prob("fp_on_distractor", self.fp_on_distractor)?;
        for (name, (lo, hi)) in [("tp_conf", self.tp_conf), ("fp_conf", self.fp_conf)] {
            if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
                return Err(Error::Config(format!("{name} range ({lo}, {hi}) invalid")));
            }
        }
        if self.width == 0 || self.height == 0 || self.passes == 0 || self.distractor_cell == 0 {
            return Err(Error::Config(
                "width, height, passes and distractor_cell must be positive".into(),
            ));
        }
        if self.min_size < 4 || self.max_size < self.min_size {
            return Err(Error::Config("need 4 <= min_size <= max_size".into()));
        }
        if self.max_size >= self.width.min(self.height) {
            return Err(Error::Config(
                "max_size must be below the image size".into(),
            ));
        }
        if !(self.sigma_loc >= 0.0 && self.sigma_conf >= 0.0 && self.fp_rate >= 0.0) {
            return Err(Error::Config(
                "noise parameters must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DistractorKind {
    /// High-contrast black-and-white checker panel.
    Checker,
    /// Soft blob in a saturated non-fire hue.
    WrongHue,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Distractor {
    pub bbox: BoundingBox,
    pub kind: DistractorKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub image_id: String,
    pub image: ImageBuffer,
    pub ground_truth: Vec<GroundTruthBox>,
    pub distractors: Vec<Distractor>,
    pub passes: Vec<PassDetections>,
}

pub fn scene_id(index: usize) -> String {
    format!("scene_{index:05}")
}

fn place(rng: &mut Rng, spec: &SceneSpec, taken: &[BoundingBox]) -> Option<BoundingBox> {
    for _ in 0..200 {
        let side = |rng: &mut Rng| {
            f64::from(spec.min_size)
                + rng.below(u64::from(spec.max_size - spec.min_size) + 1) as f64
        };
        let w = side(rng);
        let h = side(rng);
        let x = rng.below((f64::from(spec.width) - w) as u64 + 1) as f64;
        let y = rng.below((f64::from(spec.height) - h) as u64 + 1) as f64;
        let b = BoundingBox {
            x_min: x,
            y_min: y,
            x_max: x + w,
            y_max: y + h,
        };
        // Keep a margin so blurred borders do not touch.
        let grown = BoundingBox {
            x_min: b.x_min - 4.0,
            y_min: b.y_min - 4.0,
            x_max: b.x_max + 4.0,
            y_max: b.y_max + 4.0,
        };
        if taken.iter().all(|t| crate::geometry::iou(t, &grown) == 0.0) {
            return Some(b);
        }
    }
    None
}

fn blend(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    [
        a[0] + (b[0] - a[0]) * t,
        a[1] + (b[1] - a[1]) * t,
        a[2] + (b[2] - a[2]) * t,
    ]
}

/// Normalized elliptical radius of pixel `(x, y)` inside box `b`.
fn radius(b: &BoundingBox, x: u32, y: u32) -> f64 {
    let (cx, cy) = b.center();
    let dx = (f64::from(x) + 0.5 - cx) / (0.5 * b.width());
    let dy = (f64::from(y) + 0.5 - cy) / (0.5 * b.height());
    (dx * dx + dy * dy).sqrt()
}

fn pixel_range(b: &BoundingBox) -> (std::ops::Range<u32>, std::ops::Range<u32>) {
    (
        b.x_min as u32..b.x_max.ceil() as u32,
        b.y_min as u32..b.y_max.ceil() as u32,
    )
}

/// Opacity of a soft-edged blob: solid inside 0.85, fading to 0 at radius 1.
fn soft_alpha(r: f64) -> f64 {
    if r <= 0.85 {
        1.0
    } else {
        ((1.0 - r) / 0.15).clamp(0.0, 1.0)
    }
}

fn paint_fire(canvas: &mut [Vec<[f64; 3]>], b: &BoundingBox) {
    let (xs, ys) = pixel_range(b);
    for y in ys {
        for x in xs.clone() {
            let r = radius(b, x, y);
            let a = soft_alpha(r);
            if a > 0.0 {
                let color = blend(FIRE_CORE, FIRE_RIM, (r / 0.85).min(1.0));
                let px = &mut canvas[y as usize][x as usize];
                *px = blend(*px, color, a);
            }
        }
    }
}

fn paint_smoke(canvas: &mut [Vec<[f64; 3]>], b: &BoundingBox) {
    let (xs, ys) = pixel_range(b);
    for y in ys {
        for x in xs.clone() {
            let r = radius(b, x, y);
            let a = soft_alpha(r);
            if a > 0.0 {
                let g = 200.0 - 55.0 * r.min(1.0);
                let px = &mut canvas[y as usize][x as usize];
                *px = blend(*px, [g, g + 3.0, g + 8.0], a);
            }
        }
    }
}

fn paint_checker(canvas: &mut [Vec<[f64; 3]>], b: &BoundingBox, cell: u32) {
    let (xs, ys) = pixel_range(b);
    for y in ys {
        for x in xs.clone() {
            let lx = x - b.x_min as u32;
            let ly = y - b.y_min as u32;
            canvas[y as usize][x as usize] = if (lx / cell + ly / cell).is_multiple_of(2) {
                [255.0; 3]
            } else {
                [0.0; 3]
            };
        }
    }
}

fn paint_wrong_hue(canvas: &mut [Vec<[f64; 3]>], b: &BoundingBox, hue: [f64; 3]) {
    let (xs, ys) = pixel_range(b);
    for y in ys {
        for x in xs.clone() {
            let a = soft_alpha(radius(b, x, y));
            if a > 0.0 {
                let px = &mut canvas[y as usize][x as usize];
                *px = blend(*px, hue, a);
            }
        }
    }
}

struct SimObject {
    bbox: BoundingBox,
    class_id: ClassId,
    base: f64,
    true_object: bool,
}

fn jitter(rng: &mut Rng, b: &BoundingBox, sigma: f64, w: u32, h: u32) -> BoundingBox {
    if sigma == 0.0 {
        return *b;
    }
    let mut j = BoundingBox {
        x_min: b.x_min + sigma * rng.normal(),
        y_min: b.y_min + sigma * rng.normal(),
        x_max: b.x_max + sigma * rng.normal(),
        y_max: b.y_max + sigma * rng.normal(),
    };
    if j.x_max < j.x_min + 1.0 {
        j.x_max = j.x_min + 1.0;
    }
    if j.y_max < j.y_min + 1.0 {
        j.y_max = j.y_min + 1.0;
    }
    clip_to_image(&j, w, h)
}

/// Renders scene `index` of the corpus described by `spec`. Pure in
/// `(spec, index)`.
pub fn generate_scene(spec: &SceneSpec, index: usize) -> Result<Scene> {
    spec.validate()?;
    let mut rng = Rng::for_stream(spec.seed, index as u64);
    let (w, h) = (spec.width, spec.height);

    let mut taken: Vec<BoundingBox> = Vec::new();
    let mut ground_truth = Vec::new();
    for (count, class_id) in [(spec.fire_blobs, FIRE), (spec.smoke_blobs, SMOKE)] {
        for _ in 0..count {
            if let Some(b) = place(&mut rng, spec, &taken) {
                taken.push(b);
                ground_truth.push(GroundTruthBox { bbox: b, class_id });
            }
        }
    }
    let mut distractors = Vec::new();
    for _ in 0..spec.distractors {
        if let Some(b) = place(&mut rng, spec, &taken) {
            taken.push(b);
            let kind = if rng.bernoulli(0.5) {
                DistractorKind::Checker
            } else {
                DistractorKind::WrongHue
            };
            distractors.push(Distractor { bbox: b, kind });
        }
    }

    let mut canvas: Vec<Vec<[f64; 3]>> = (0..h)
        .map(|y| {
            let shade = 1.0 + 0.25 * f64::from(y) / f64::from(h);
            (0..w).map(|_| BACKGROUND.map(|c| c * shade)).collect()
        })
        .collect();
    for gt in &ground_truth {
        match gt.class_id {
            FIRE => paint_fire(&mut canvas, &gt.bbox),
            _ => paint_smoke(&mut canvas, &gt.bbox),
        }
    }
    for d in &distractors {
        match d.kind {
            DistractorKind::Checker => paint_checker(&mut canvas, &d.bbox, spec.distractor_cell),
            DistractorKind::WrongHue => {
                let hues = [
                    [40.0, 90.0, 230.0],
                    [60.0, 210.0, 70.0],
                    [200.0, 40.0, 210.0],
                ];
                let hue = hues[rng.below(hues.len() as u64) as usize];
                paint_wrong_hue(&mut canvas, &d.bbox, hue);
            }
        }
    }
    // Checker panels stay noise-free: with thin Canny edges only clean,
    // full-contrast cells reach the edge density of a saturated edge score.
    let panels: Vec<BoundingBox> = distractors
        .iter()
        .filter(|d| d.kind == DistractorKind::Checker)
        .map(|d| d.bbox)
        .collect();
    let mut pixels = Vec::with_capacity((w * h) as usize);
    for (y, row) in canvas.into_iter().enumerate() {
        for (x, px) in row.into_iter().enumerate() {
            let (fx, fy) = (x as f64, y as f64);
            let clean = panels
                .iter()
                .any(|b| fx >= b.x_min && fx < b.x_max && fy >= b.y_min && fy < b.y_max);
            let noise = if clean { 0.0 } else { 3.0 };
            pixels
                .push(px.map(|c| (c + rng.uniform(-noise, noise)).round().clamp(0.0, 255.0) as u8));
        }
    }
    let image = ImageBuffer::new(w, h, pixels)?;

    let mut objects: Vec<SimObject> = ground_truth
        .iter()
        .map(|g| SimObject {
            bbox: g.bbox,
            class_id: g.class_id,
            base: rng.uniform(spec.tp_conf.0, spec.tp_conf.1),
            true_object: true,
        })
        .collect();
    let n_fp = rng.poisson(spec.fp_rate);
    for _ in 0..n_fp {
        let class_id = if rng.bernoulli(0.5) { FIRE } else { SMOKE };
        let on_distractor = !distractors.is_empty() && rng.bernoulli(spec.fp_on_distractor);
        let bbox = if on_distractor {
            distractors[rng.below(distractors.len() as u64) as usize].bbox
        } else {
            match place(&mut rng, spec, &taken) {
                Some(b) => b,
                None => continue,
            }
        };
        objects.push(SimObject {
            bbox,
            class_id,
            base: rng.uniform(spec.fp_conf.0, spec.fp_conf.1),
            true_object: false,
        });
    }

    let image_id = scene_id(index);
    let mut passes = Vec::with_capacity(spec.passes as usize);
    for pass in 0..spec.passes {
        let mut detections = Vec::new();
        for o in &objects {
            let miss = match (o.true_object, pass) {
                (true, 0) => spec.primary_p_miss,
                (true, _) => spec.p_miss,
                (false, 0) => 0.0,
                (false, _) => spec.fp_p_miss,
            };
            if rng.bernoulli(miss) {
                continue;
            }
            let bbox = jitter(&mut rng, &o.bbox, spec.sigma_loc, w, h);
            let noise = if spec.sigma_conf > 0.0 {
                spec.sigma_conf * rng.normal()
            } else {
                0.0
            };
            let conf = (o.base - noise).clamp(0.01, 0.99);
            detections.push(Detection::new(bbox, o.class_id, conf)?);
        }
        passes.push(PassDetections {
            image_id: image_id.clone(),
            pass_index: pass,
            detections,
        });
    }

    Ok(Scene {
        image_id,
        image,
        ground_truth,
        distractors,
        passes,
    })
}

/// Writes `n_images` scenes under `out_dir` (`images/`, `labels/`,
/// `detections/`, `manifest.json`) and returns the loaded dataset.
pub fn generate_corpus(spec: &SceneSpec, n_images: usize, out_dir: &Path) -> Result<Dataset> {
    spec.validate()?;
    for sub in ["images", "labels", "detections"] {
        let d = out_dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let mut images = Vec::with_capacity(n_images);
    for index in 0..n_images {
        let scene = generate_scene(spec, index)?;
        let id = &scene.image_id;
        let image = PathBuf::from("images").join(format!("{id}.ppm"));
        let labels = PathBuf::from("labels").join(format!("{id}.txt"));
        let detections = PathBuf::from("detections").join(format!("{id}.jsonl"));
        save_ppm(&scene.image, &out_dir.join(&image))?;
        let label_path = out_dir.join(&labels);
        fs::write(
            &label_path,
            format_yolo_labels(&scene.ground_truth, spec.width, spec.height),
        )
        .map_err(|e| Error::io(&label_path, e))?;
        write_detection_passes(&out_dir.join(&detections), &scene.passes)?;
        images.push(ManifestEntry {
            image_id: id.clone(),
            image,
            width: spec.width,
            height: spec.height,
            labels: Some(labels),
            detections: Some(detections),
        });
    }
    let ds = Dataset {
        root: out_dir.to_path_buf(),
        manifest: Manifest {
            format_version: 1,
            classes: default_classes(),
            images,
        },
    };
    ds.save(&out_dir.join("manifest.json"))?;
    Ok(ds)
}
