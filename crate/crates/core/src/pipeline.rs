//! Dataset-level wiring: passes to features, features to refined detections,
//! detections to evaluation input, plus the run configuration shared by the CLI.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::baselines::{self, BaselineConfig, Method};
use crate::crn::{self, CrnParameters, FeatureVector, RefinedDetection, TrainConfig};
use crate::error::{Error, Result};
use crate::eval::{EvalImage, EvalMode, StageClock};
use crate::geometry::{clip_to_image, ClassId, Detection};
use crate::imfeat::{self, FeatureConfig, FeatureRow};
use crate::ingest::{
    crop, BoxRecord, Dataset, DetectionLine, ImageBuffer, ManifestEntry, PassDetections,
};
use crate::synthbench::SceneSpec;
use crate::uncertainty::{self, UncertaintyEstimate};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    /// Passes used for the variance estimate, primary included. Extra passes
    /// in the dump are ignored; fewer is fine.
    pub passes: usize,
    /// IoU for cross-pass association.
    pub match_iou: f64,
    /// IoU for training labels.
    pub label_iou: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            passes: 5,
            match_iou: uncertainty::DEFAULT_MATCH_IOU,
            label_iou: 0.5,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.passes == 0 {
            return Err(Error::Config("passes must be at least 1".into()));
        }
        for (name, v) in [("match_iou", self.match_iou), ("label_iou", self.label_iou)] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(Error::Config(format!("{name} {v} outside (0, 1]")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RescoreConfig {
    /// Overrides the threshold stored in the model file.
    pub tau: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub mode: EvalMode,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            mode: EvalMode::Discard,
        }
    }
}

/// Every tunable, loadable from TOML. Unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub synth: SceneSpec,
    pub pipeline: PipelineConfig,
    pub features: FeatureConfig,
    pub baselines: BaselineConfig,
    pub train: TrainConfig,
    pub rescore: RescoreConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.pipeline.validate()?;
        self.features.validate()?;
        self.baselines.validate()?;
        self.train.validate()?;
        if let Some(t) = self.rescore.tau {
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::Config(format!("tau {t} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// One primary detection with everything the network needs.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredDetection {
    pub det_index: usize,
    pub detection: Detection,
    pub uncertainty: UncertaintyEstimate,
    pub features: FeatureVector,
}

/// Primary pass (index 0) and up to `n - 1` further passes, clipped to the image.
pub fn select_passes(
    passes: &[PassDetections],
    n: usize,
    width: u32,
    height: u32,
) -> (PassDetections, Vec<PassDetections>) {
    let clip = |p: &PassDetections| PassDetections {
        image_id: p.image_id.clone(),
        pass_index: p.pass_index,
        detections: p
            .detections
            .iter()
            .map(|d| Detection {
                bbox: clip_to_image(&d.bbox, width, height),
                ..*d
            })
            .collect(),
    };
    let primary = passes
        .iter()
        .find(|p| p.pass_index == 0)
        .map(clip)
        .unwrap_or_else(|| PassDetections {
            image_id: passes
                .first()
                .map(|p| p.image_id.clone())
                .unwrap_or_default(),
            pass_index: 0,
            detections: Vec::new(),
        });
    let mut others: Vec<&PassDetections> = passes.iter().filter(|p| p.pass_index != 0).collect();
    others.sort_by_key(|p| p.pass_index);
    let others = others
        .into_iter()
        .take(n.saturating_sub(1))
        .map(clip)
        .collect();
    (primary, others)
}

/// Uncertainty and region features for every primary detection of one image.
pub fn score_image(
    image: &ImageBuffer,
    passes: &[PassDetections],
    cfg: &PipelineConfig,
    features: &FeatureConfig,
    clock: &mut StageClock,
) -> Result<Vec<ScoredDetection>> {
    let (primary, others) = select_passes(passes, cfg.passes, image.width, image.height);
    let est = clock.time("uncertainty", || {
        uncertainty::estimate_all(&primary, &others, cfg.match_iou)
    });
    clock.time("features", || {
        primary
            .detections
            .iter()
            .zip(est)
            .enumerate()
            .map(|(i, (d, u))| {
                let region = imfeat::region_features(&crop(image, &d.bbox), d.class_id, features)?;
                Ok(ScoredDetection {
                    det_index: i,
                    detection: *d,
                    features: imfeat::build_feature_vector(d, &u, &region)?,
                    uncertainty: u,
                })
            })
            .collect()
    })
}

/// Full per-image inference: features, then the network and threshold.
pub fn refine_image(
    image: &ImageBuffer,
    passes: &[PassDetections],
    cfg: &PipelineConfig,
    features: &FeatureConfig,
    params: &CrnParameters,
    tau: f64,
    clock: &mut StageClock,
) -> Result<Vec<RefinedDetection>> {
    let scored = score_image(image, passes, cfg, features, clock)?;
    let items: Vec<(Detection, FeatureVector)> =
        scored.iter().map(|s| (s.detection, s.features)).collect();
    clock.time("crn", || crn::rescore_and_threshold(params, &items, tau))
}

/// Runs `f` on every manifest entry; failures are collected so one bad file
/// does not hide the others.
fn per_entry<T>(
    ds: &Dataset,
    mut f: impl FnMut(&ManifestEntry) -> Result<T>,
    mut progress: impl FnMut(usize, usize),
) -> Result<Vec<T>> {
    let n = ds.entries().len();
    let mut out = Vec::with_capacity(n);
    let mut errors = Vec::new();
    for (i, e) in ds.entries().iter().enumerate() {
        match f(e) {
            Ok(v) => out.push(v),
            Err(err) => errors.push(format!("  {}: {err}", e.image_id)),
        }
        progress(i + 1, n);
    }
    if errors.is_empty() {
        Ok(out)
    } else {
        Err(Error::Validation(format!(
            "{} of {n} images failed:\n{}",
            errors.len(),
            errors.join("\n")
        )))
    }
}

/// Feature rows for the whole dataset, labeled against ground truth when
/// `with_labels` is set.
pub fn extract_features(
    ds: &Dataset,
    cfg: &PipelineConfig,
    features: &FeatureConfig,
    with_labels: bool,
    progress: impl FnMut(usize, usize),
) -> Result<Vec<FeatureRow>> {
    let per_image = per_entry(
        ds,
        |e| {
            if with_labels && e.labels.is_none() {
                return Err(Error::Validation("no labels file in manifest".into()));
            }
            let image = ds.image(e)?;
            let passes = ds.passes(e)?;
            let scored = score_image(&image, &passes, cfg, features, &mut StageClock::default())?;
            let labels = if with_labels {
                let gt = ds.record(e)?.ground_truth;
                let dets: Vec<Detection> = scored.iter().map(|s| s.detection).collect();
                Some(crn::training_labels(&dets, &gt, cfg.label_iou))
            } else {
                None
            };
            Ok(scored
                .iter()
                .map(|s| {
                    let [c, var, sc, ec, tc] = s.features.values();
                    FeatureRow {
                        image_id: e.image_id.clone(),
                        det_index: s.det_index,
                        class: s.detection.class_id,
                        c,
                        var,
                        s: sc,
                        e: ec,
                        t: tc,
                        label: labels.as_ref().map(|l| l[s.det_index]),
                    }
                })
                .collect::<Vec<_>>())
        },
        progress,
    )?;
    Ok(per_image.into_iter().flatten().collect())
}

pub fn training_examples(rows: &[FeatureRow]) -> Result<Vec<crn::Example>> {
    rows.iter()
        .map(|r| {
            let label = r.label.ok_or_else(|| {
                Error::Validation(format!("row {}/{} has no label", r.image_id, r.det_index))
            })?;
            Ok(crn::Example {
                features: r.features()?,
                label,
            })
        })
        .collect()
}

/// Refined detections as JSONL lines: pass 0, raw `conf`, `refined_conf`, `kept`.
pub fn refined_lines(image_id: &str, refined: &[RefinedDetection]) -> DetectionLine {
    DetectionLine {
        image_id: image_id.to_string(),
        pass: 0,
        boxes: refined
            .iter()
            .map(|r| BoxRecord {
                refined_conf: Some(r.refined_confidence),
                kept: Some(r.kept),
                ..BoxRecord::from_detection(&r.detection)
            })
            .collect(),
    }
}

pub fn rescore_dataset(
    ds: &Dataset,
    cfg: &PipelineConfig,
    features: &FeatureConfig,
    params: &CrnParameters,
    tau: f64,
    progress: impl FnMut(usize, usize),
) -> Result<Vec<DetectionLine>> {
    per_entry(
        ds,
        |e| {
            let image = ds.image(e)?;
            let passes = ds.passes(e)?;
            let refined = refine_image(
                &image,
                &passes,
                cfg,
                features,
                params,
                tau,
                &mut StageClock::default(),
            )?;
            Ok(refined_lines(&e.image_id, &refined))
        },
        progress,
    )
}

/// Applies a baseline to each image's primary pass.
pub fn baseline_dataset(
    ds: &Dataset,
    method: Method,
    cfg: &BaselineConfig,
    features: &FeatureConfig,
    progress: impl FnMut(usize, usize),
) -> Result<Vec<DetectionLine>> {
    per_entry(
        ds,
        |e| {
            let passes = ds.passes(e)?;
            let (primary, _) = select_passes(&passes, 1, e.width, e.height);
            let needs_pixels = matches!(method, Method::Ebf | Method::Cbf | Method::Hbcf);
            let image = if needs_pixels {
                ds.image(e)?
            } else {
                ImageBuffer::filled(1, 1, [0, 0, 0])
            };
            let kept = baselines::apply(method, &image, &primary.detections, cfg, features);
            Ok(DetectionLine {
                image_id: e.image_id.clone(),
                pass: 0,
                boxes: kept.iter().map(BoxRecord::from_detection).collect(),
            })
        },
        progress,
    )
}

/// Turns one output record into the detection that is ranked during
/// evaluation, or `None` if the mode discards it.
pub fn eval_detection(rec: &BoxRecord, mode: EvalMode) -> Result<Option<Detection>> {
    if mode == EvalMode::Discard && rec.kept == Some(false) {
        return Ok(None);
    }
    let mut d = rec.to_detection()?;
    if let Some(r) = rec.refined_conf {
        if !(0.0..=1.0).contains(&r) {
            return Err(Error::Validation(format!(
                "refined_conf {r} outside [0, 1]"
            )));
        }
        d.confidence = r;
    }
    Ok(Some(d))
}

/// Evaluation input for a dataset. `lines` holds a method's output; when it is
/// `None` the manifest's primary pass is used (raw detector confidences).
/// Detections of classes outside `classes` are an error.
pub fn eval_images(
    ds: &Dataset,
    lines: Option<&[DetectionLine]>,
    mode: EvalMode,
    classes: &[ClassId],
) -> Result<Vec<EvalImage>> {
    let check = |d: &Detection| {
        if classes.contains(&d.class_id) {
            Ok(())
        } else {
            Err(Error::Validation(format!(
                "detection class {} not in class set {classes:?}",
                d.class_id
            )))
        }
    };
    let mut images = Vec::with_capacity(ds.entries().len());
    for e in ds.entries() {
        let ground_truth = ds.record(e)?.ground_truth;
        let detections = match lines {
            None => {
                let passes = ds.passes(e)?;
                select_passes(&passes, 1, e.width, e.height).0.detections
            }
            Some(lines) => {
                let mut dets = Vec::new();
                for l in lines
                    .iter()
                    .filter(|l| l.image_id == e.image_id && l.pass == 0)
                {
                    for b in &l.boxes {
                        if let Some(d) = eval_detection(b, mode)? {
                            dets.push(Detection {
                                bbox: clip_to_image(&d.bbox, e.width, e.height),
                                ..d
                            });
                        }
                    }
                }
                dets
            }
        };
        for d in &detections {
            check(d)?;
        }
        images.push(EvalImage {
            image_id: e.image_id.clone(),
            ground_truth,
            detections,
        });
    }
    Ok(images)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::evaluate;
    use crate::synthbench::{generate_corpus, SceneSpec};

    #[test]
    fn config_rejects_unknown_keys() {
        assert!(RunConfig::from_toml("[train]\nlearning_rate = 0.01\n").is_ok());
        assert!(RunConfig::from_toml("[train]\nlr = 0.01\n").is_err());
        assert!(RunConfig::from_toml("bogus = 1\n").is_err());
        let cfg = RunConfig::from_toml("[eval]\nmode = \"rank-all\"\n").unwrap();
        assert_eq!(cfg.eval.mode, EvalMode::RankAll);
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn default_config_round_trips_through_toml() {
        let cfg = RunConfig::default();
        let text = toml::to_string(&cfg).unwrap();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn single_pass_gives_zero_variance() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_corpus(&SceneSpec::default(), 3, dir.path()).unwrap();
        let cfg = PipelineConfig {
            passes: 1,
            ..PipelineConfig::default()
        };
        let rows = extract_features(&ds, &cfg, &FeatureConfig::default(), true, |_, _| {}).unwrap();
        assert!(!rows.is_empty());
        assert!(rows.iter().all(|r| r.var == 0.0 && r.label.is_some()));
    }

    #[test]
    fn perfect_and_empty_detections() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_corpus(&SceneSpec::noiseless(), 4, dir.path()).unwrap();
        let classes = ds.manifest.class_ids();
        let names: Vec<(ClassId, String)> = classes
            .iter()
            .map(|&c| (c, ds.manifest.class_name(c)))
            .collect();
        let raw = eval_images(&ds, None, EvalMode::Discard, &classes).unwrap();
        let r = evaluate("raw", EvalMode::Discard, &raw, &names);
        assert_eq!((r.precision, r.recall, r.map50), (1.0, 1.0, 1.0));
        let empty: Vec<DetectionLine> = Vec::new();
        let none = eval_images(&ds, Some(&empty), EvalMode::Discard, &classes).unwrap();
        assert_eq!(
            evaluate("none", EvalMode::Discard, &none, &names).recall,
            0.0
        );
        assert!(eval_images(&ds, None, EvalMode::Discard, &[0]).is_err());
    }

    #[test]
    fn tau_extremes() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_corpus(&SceneSpec::default(), 2, dir.path()).unwrap();
        let params = CrnParameters::he_uniform(&mut crate::rng::Rng::new(3));
        let p = PipelineConfig::default();
        let f = FeatureConfig::default();
        let all = rescore_dataset(&ds, &p, &f, &params, 0.0, |_, _| {}).unwrap();
        assert!(all
            .iter()
            .flat_map(|l| &l.boxes)
            .all(|b| b.kept == Some(true)));
        let none = rescore_dataset(&ds, &p, &f, &params, 1.0, |_, _| {}).unwrap();
        assert!(none
            .iter()
            .flat_map(|l| &l.boxes)
            .all(|b| b.kept == Some(false)));
        let n: usize = all.iter().map(|l| l.boxes.len()).sum();
        assert!(n > 0);
    }

    #[test]
    fn bad_image_is_named_in_error() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_corpus(&SceneSpec::default(), 3, dir.path()).unwrap();
        fs::write(
            dir.path().join("images/scene_00001.ppm"),
            b"P6\n4 4\n255\nxx",
        )
        .unwrap();
        let err = extract_features(
            &ds,
            &PipelineConfig::default(),
            &FeatureConfig::default(),
            false,
            |_, _| {},
        )
        .unwrap_err()
        .to_string();
        assert!(err.contains("scene_00001"), "{err}");
        assert!(!err.contains("scene_00000"), "{err}");
    }

    #[test]
    fn select_passes_limits_and_orders() {
        let mk = |i| PassDetections {
            image_id: "a".into(),
            pass_index: i,
            detections: Vec::new(),
        };
        let passes = vec![mk(3), mk(0), mk(1), mk(2)];
        let (p, o) = select_passes(&passes, 3, 10, 10);
        assert_eq!(p.pass_index, 0);
        assert_eq!(
            o.iter().map(|p| p.pass_index).collect::<Vec<_>>(),
            vec![1, 2]
        );
        let (_, o) = select_passes(&passes, 1, 10, 10);
        assert!(o.is_empty());
    }
}
