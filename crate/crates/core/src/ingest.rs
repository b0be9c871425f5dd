//! File formats consumed and emitted by the toolkit.
//!
//! * Ground truth: YOLO text labels, one `class cx cy w h` line per box with
//!   normalized center-form coordinates.
//! * Detections: JSON-Lines, one object per `(image_id, pass)`:
//!   `{"image_id": "...", "pass": 0, "boxes": [{"class": 1, "x_min": .., "y_min": ..,
//!   "x_max": .., "y_max": .., "conf": ..}]}`. Boxes may additionally carry
//!   `refined_conf` and `kept` once rescored. Detections are expected raw,
//!   i.e. before any suppression.
//! * Images: binary PPM (P6, maxval 255); binary PGM (P5) is accepted and
//!   replicated to three channels.
//! * Dataset manifest: JSON, see [`Manifest`].

use std::collections::HashMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{clip_to_image, BoundingBox, ClassId, Detection, FIRE, SMOKE};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroundTruthBox {
    pub bbox: BoundingBox,
    pub class_id: ClassId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub image_id: String,
    pub path: PathBuf,
    pub width: u32,
    pub height: u32,
    pub ground_truth: Vec<GroundTruthBox>,
}

/// Detections from one inference pass over one image. Pass 0 is the primary pass.
#[derive(Debug, Clone, PartialEq)]
pub struct PassDetections {
    pub image_id: String,
    pub pass_index: u32,
    pub detections: Vec<Detection>,
}

/// 8-bit RGB raster, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageBuffer {
    pub width: u32,
    pub height: u32,
    pub pixels: Vec<[u8; 3]>,
}

impl ImageBuffer {
    pub fn new(width: u32, height: u32, pixels: Vec<[u8; 3]>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Validation(format!(
                "image dimensions must be positive, got {width}x{height}"
            )));
        }
        if pixels.len() != width as usize * height as usize {
            return Err(Error::Validation(format!(
                "{} pixels for a {width}x{height} image",
                pixels.len()
            )));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: u32, height: u32, rgb: [u8; 3]) -> Self {
        Self {
            width,
            height,
            pixels: vec![rgb; width as usize * height as usize],
        }
    }

    pub fn get(&self, x: u32, y: u32) -> [u8; 3] {
        self.pixels[y as usize * self.width as usize + x as usize]
    }

    pub fn set(&mut self, x: u32, y: u32, rgb: [u8; 3]) {
        let w = self.width as usize;
        self.pixels[y as usize * w + x as usize] = rgb;
    }

    pub fn full_box(&self) -> BoundingBox {
        BoundingBox {
            x_min: 0.0,
            y_min: 0.0,
            x_max: f64::from(self.width),
            y_max: f64::from(self.height),
        }
    }
}

// ---------------------------------------------------------------------------
// YOLO labels

/// Parses YOLO label text. `path` is only used in error messages.
pub fn parse_yolo_labels(
    text: &str,
    path: &Path,
    image_width: u32,
    image_height: u32,
    classes: &[ClassId],
) -> Result<Vec<GroundTruthBox>> {
    let w = f64::from(image_width);
    let h = f64::from(image_height);
    let mut out = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 5 {
            return Err(Error::parse(
                path,
                line_no,
                format!(
                    "expected 5 fields `class cx cy w h`, found {}",
                    fields.len()
                ),
            ));
        }
        let class_id: ClassId = fields[0]
            .parse()
            .map_err(|_| Error::parse(path, line_no, format!("bad class id {:?}", fields[0])))?;
        let mut vals = [0.0f64; 4];
        for (v, s) in vals.iter_mut().zip(&fields[1..]) {
            *v = s
                .parse()
                .map_err(|_| Error::parse(path, line_no, format!("bad number {s:?}")))?;
        }
        if !classes.contains(&class_id) {
            return Err(Error::Validation(format!(
                "{}:{line_no}: class {class_id} not in class set {classes:?}",
                path.display()
            )));
        }
        if let Some(bad) = vals.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Validation(format!(
                "{}:{line_no}: normalized value {bad} outside [0, 1]",
                path.display()
            )));
        }
        let [cx, cy, bw, bh] = vals;
        let bbox = BoundingBox {
            x_min: (cx - bw / 2.0) * w,
            y_min: (cy - bh / 2.0) * h,
            x_max: (cx + bw / 2.0) * w,
            y_max: (cy + bh / 2.0) * h,
        };
        out.push(GroundTruthBox {
            bbox: clip_to_image(&bbox, image_width, image_height),
            class_id,
        });
    }
    Ok(out)
}

pub fn load_yolo_ground_truth(
    label_file: &Path,
    image_width: u32,
    image_height: u32,
    classes: &[ClassId],
) -> Result<Vec<GroundTruthBox>> {
    let text = fs::read_to_string(label_file).map_err(|e| Error::io(label_file, e))?;
    parse_yolo_labels(&text, label_file, image_width, image_height, classes)
}

/// Formats boxes as YOLO label lines.
pub fn format_yolo_labels(boxes: &[GroundTruthBox], image_width: u32, image_height: u32) -> String {
    let w = f64::from(image_width);
    let h = f64::from(image_height);
    let mut s = String::new();
    for gt in boxes {
        let b = &gt.bbox;
        let cx = 0.5 * (b.x_min + b.x_max) / w;
        let cy = 0.5 * (b.y_min + b.y_max) / h;
        s.push_str(&format!(
            "{} {} {} {} {}\n",
            gt.class_id,
            cx,
            cy,
            b.width() / w,
            b.height() / h
        ));
    }
    s
}

// ---------------------------------------------------------------------------
// Detection JSON-Lines

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxRecord {
    pub class: ClassId,
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
    pub conf: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub refined_conf: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kept: Option<bool>,
}

impl BoxRecord {
    pub fn from_detection(d: &Detection) -> Self {
        Self {
            class: d.class_id,
            x_min: d.bbox.x_min,
            y_min: d.bbox.y_min,
            x_max: d.bbox.x_max,
            y_max: d.bbox.y_max,
            conf: d.confidence,
            refined_conf: None,
            kept: None,
        }
    }

    pub fn to_detection(&self) -> Result<Detection> {
        let bbox = BoundingBox::new(self.x_min, self.y_min, self.x_max, self.y_max)?;
        Detection::new(bbox, self.class, self.conf)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionLine {
    pub image_id: String,
    pub pass: u32,
    pub boxes: Vec<BoxRecord>,
}

/// Parses detection JSON-Lines into raw lines, validating every box.
pub fn parse_detection_lines(text: &str, path: &Path) -> Result<Vec<DetectionLine>> {
    let mut out = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let line: DetectionLine =
            serde_json::from_str(raw).map_err(|e| Error::parse(path, line_no, e.to_string()))?;
        for b in &line.boxes {
            for (name, v) in [("conf", Some(b.conf)), ("refined_conf", b.refined_conf)] {
                if let Some(v) = v {
                    if !(0.0..=1.0).contains(&v) {
                        return Err(Error::Validation(format!(
                            "{}:{line_no}: {name} {v} outside [0, 1]",
                            path.display()
                        )));
                    }
                }
            }
            b.to_detection()
                .map_err(|e| Error::Validation(format!("{}:{line_no}: {e}", path.display())))?;
        }
        out.push(line);
    }
    Ok(out)
}

/// Groups lines by `(image_id, pass)` in order of first appearance.
pub fn group_passes(lines: &[DetectionLine]) -> Result<Vec<PassDetections>> {
    let mut index: HashMap<(String, u32), usize> = HashMap::new();
    let mut out: Vec<PassDetections> = Vec::new();
    for line in lines {
        let key = (line.image_id.clone(), line.pass);
        let slot = *index.entry(key).or_insert_with(|| {
            out.push(PassDetections {
                image_id: line.image_id.clone(),
                pass_index: line.pass,
                detections: Vec::new(),
            });
            out.len() - 1
        });
        for b in &line.boxes {
            out[slot].detections.push(b.to_detection()?);
        }
    }
    Ok(out)
}

pub fn load_detection_passes(dump_file: &Path) -> Result<Vec<PassDetections>> {
    let text = fs::read_to_string(dump_file).map_err(|e| Error::io(dump_file, e))?;
    group_passes(&parse_detection_lines(&text, dump_file)?)
}

pub fn detection_line(p: &PassDetections) -> DetectionLine {
    DetectionLine {
        image_id: p.image_id.clone(),
        pass: p.pass_index,
        boxes: p.detections.iter().map(BoxRecord::from_detection).collect(),
    }
}

pub fn write_detection_lines(path: &Path, lines: &[DetectionLine]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for line in lines {
        let s = serde_json::to_string(line).map_err(|e| Error::Validation(e.to_string()))?;
        writeln!(w, "{s}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_detection_passes(path: &Path, passes: &[PassDetections]) -> Result<()> {
    let lines: Vec<DetectionLine> = passes.iter().map(detection_line).collect();
    write_detection_lines(path, &lines)
}

// ---------------------------------------------------------------------------
// Images

fn decode_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Decode {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

/// Decodes a binary PPM (P6) or PGM (P5) with maxval 255.
pub fn decode_pnm(bytes: &[u8], path: &Path) -> Result<ImageBuffer> {
    let magic = bytes
        .get(..2)
        .ok_or_else(|| decode_err(path, "file too short"))?;
    let channels = match magic {
        b"P6" => 3,
        b"P5" => 1,
        _ => {
            return Err(Error::UnsupportedImage {
                path: path.to_path_buf(),
                format: describe_magic(bytes),
            })
        }
    };

    // Header: magic, width, height, maxval, separated by whitespace with
    // optional `#` comments, then exactly one whitespace byte before raster data.
    let mut pos = 2;
    let mut fields = [0u32; 3];
    for field in &mut fields {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while !matches!(bytes.get(pos), Some(b'\n') | None) {
                        pos += 1;
                    }
                }
                Some(c) if c.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(decode_err(path, "truncated header")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(decode_err(path, "malformed header"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| decode_err(path, "header value out of range"))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(decode_err(path, "missing whitespace after header"));
    }
    pos += 1;

    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return Err(decode_err(path, "zero image dimension"));
    }
    if maxval != 255 {
        return Err(Error::UnsupportedImage {
            path: path.to_path_buf(),
            format: format!("PNM with maxval {maxval} (only 255 is supported)"),
        });
    }
    let n = width as usize * height as usize;
    let data = &bytes[pos..];
    if data.len() < n * channels {
        return Err(decode_err(
            path,
            format!("truncated raster: {} of {} bytes", data.len(), n * channels),
        ));
    }
    let pixels = if channels == 3 {
        data[..n * 3]
            .chunks_exact(3)
            .map(|c| [c[0], c[1], c[2]])
            .collect()
    } else {
        data[..n].iter().map(|&g| [g, g, g]).collect()
    };
    ImageBuffer::new(width, height, pixels)
}

fn describe_magic(bytes: &[u8]) -> String {
    if bytes.starts_with(b"\x89PNG") {
        "PNG (not supported, convert to PPM)".to_string()
    } else if bytes.starts_with(&[0xFF, 0xD8]) {
        "JPEG (not supported, convert to PPM)".to_string()
    } else if bytes.len() >= 2 && bytes[0] == b'P' && bytes[1].is_ascii_digit() {
        format!(
            "PNM variant P{} (only binary P5/P6 are supported)",
            bytes[1] as char
        )
    } else {
        "unrecognized".to_string()
    }
}

pub fn load_image(path: &Path) -> Result<ImageBuffer> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pnm(&bytes, path)
}

pub fn encode_ppm(img: &ImageBuffer) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.reserve(img.pixels.len() * 3);
    for p in &img.pixels {
        out.extend_from_slice(p);
    }
    out
}

pub fn save_ppm(img: &ImageBuffer, path: &Path) -> Result<()> {
    fs::write(path, encode_ppm(img)).map_err(|e| Error::io(path, e))
}

/// Integer pixel rectangle `[x0, x1) x [y0, y1)` covered by a box: floor the
/// minimum corner, ceil the maximum, clamp to the image, and widen to at least
/// one pixel.
pub fn crop_rect(width: u32, height: u32, b: &BoundingBox) -> (u32, u32, u32, u32) {
    let clamp = |v: f64, hi: u32| -> u32 {
        if v.is_nan() {
            0
        } else {
            v.clamp(0.0, f64::from(hi)) as u32
        }
    };
    let mut x0 = clamp(b.x_min.floor(), width);
    let mut y0 = clamp(b.y_min.floor(), height);
    let mut x1 = clamp(b.x_max.ceil(), width);
    let mut y1 = clamp(b.y_max.ceil(), height);
    if x1 <= x0 {
        x0 = x0.min(width - 1);
        x1 = x0 + 1;
    }
    if y1 <= y0 {
        y0 = y0.min(height - 1);
        y1 = y0 + 1;
    }
    (x0, y0, x1, y1)
}

pub fn crop(image: &ImageBuffer, b: &BoundingBox) -> ImageBuffer {
    let (x0, y0, x1, y1) = crop_rect(image.width, image.height, b);
    let mut pixels = Vec::with_capacity(((x1 - x0) * (y1 - y0)) as usize);
    let w = image.width as usize;
    for y in y0..y1 {
        let row = y as usize * w;
        pixels.extend_from_slice(&image.pixels[row + x0 as usize..row + x1 as usize]);
    }
    ImageBuffer {
        width: x1 - x0,
        height: y1 - y0,
        pixels,
    }
}

// ---------------------------------------------------------------------------
// Dataset manifest

/// Class id to name mapping. Defaults to the `0 = smoke, 1 = fire` convention.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassEntry {
    pub id: ClassId,
    pub name: String,
}

pub fn default_classes() -> Vec<ClassEntry> {
    vec![
        ClassEntry {
            id: SMOKE,
            name: "smoke".into(),
        },
        ClassEntry {
            id: FIRE,
            name: "fire".into(),
        },
    ]
}

/// One `(image, labels, detections)` triple. Paths are relative to the
/// manifest's directory unless absolute. `labels` and `detections` are optional.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub image_id: String,
    pub image: PathBuf,
    pub width: u32,
    pub height: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detections: Option<PathBuf>,
}

/// Dataset manifest, stored as JSON:
///
/// ```json
/// {"format_version": 1,
///  "classes": [{"id": 0, "name": "smoke"}, {"id": 1, "name": "fire"}],
///  "images": [{"image_id": "scene_0000", "image": "images/scene_0000.ppm",
///              "width": 640, "height": 480,
///              "labels": "labels/scene_0000.txt",
///              "detections": "detections/scene_0000.jsonl"}]}
/// ```
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    #[serde(default = "default_classes")]
    pub classes: Vec<ClassEntry>,
    pub images: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn class_ids(&self) -> Vec<ClassId> {
        self.classes.iter().map(|c| c.id).collect()
    }

    pub fn class_name(&self, id: ClassId) -> String {
        self.classes
            .iter()
            .find(|c| c.id == id)
            .map_or_else(|| format!("class{id}"), |c| c.name.clone())
    }
}

/// A manifest together with the directory its relative paths resolve against.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
}

impl Dataset {
    pub fn load(manifest_path: &Path) -> Result<Self> {
        let text = fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
        let manifest: Manifest = serde_json::from_str(&text)
            .map_err(|e| Error::parse(manifest_path, e.line(), format!("invalid manifest: {e}")))?;
        if manifest.format_version != 1 {
            return Err(Error::Validation(format!(
                "unsupported manifest format_version {}",
                manifest.format_version
            )));
        }
        let mut seen = std::collections::HashSet::new();
        for e in &manifest.images {
            if !seen.insert(&e.image_id) {
                return Err(Error::Validation(format!(
                    "duplicate image_id {:?}",
                    e.image_id
                )));
            }
            if e.width == 0 || e.height == 0 {
                return Err(Error::Validation(format!(
                    "image {:?} has a zero dimension",
                    e.image_id
                )));
            }
        }
        let root = manifest_path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_default();
        Ok(Self { root, manifest })
    }

    pub fn save(&self, manifest_path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.manifest)
            .map_err(|e| Error::Validation(e.to_string()))?;
        fs::write(manifest_path, text + "\n").map_err(|e| Error::io(manifest_path, e))
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn entries(&self) -> &[ManifestEntry] {
        &self.manifest.images
    }

    pub fn record(&self, entry: &ManifestEntry) -> Result<ImageRecord> {
        let ground_truth = match &entry.labels {
            Some(l) => load_yolo_ground_truth(
                &self.resolve(l),
                entry.width,
                entry.height,
                &self.manifest.class_ids(),
            )?,
            None => Vec::new(),
        };
        Ok(ImageRecord {
            image_id: entry.image_id.clone(),
            path: self.resolve(&entry.image),
            width: entry.width,
            height: entry.height,
            ground_truth,
        })
    }

    pub fn image(&self, entry: &ManifestEntry) -> Result<ImageBuffer> {
        let path = self.resolve(&entry.image);
        let img = load_image(&path)?;
        if img.width != entry.width || img.height != entry.height {
            return Err(Error::Validation(format!(
                "{}: decoded {}x{} but manifest says {}x{}",
                path.display(),
                img.width,
                img.height,
                entry.width,
                entry.height
            )));
        }
        Ok(img)
    }

    /// Detection passes for one entry, restricted to that entry's image id.
    pub fn passes(&self, entry: &ManifestEntry) -> Result<Vec<PassDetections>> {
        match &entry.detections {
            Some(d) => Ok(load_detection_passes(&self.resolve(d))?
                .into_iter()
                .filter(|p| p.image_id == entry.image_id)
                .collect()),
            None => Ok(Vec::new()),
        }
    }
}
