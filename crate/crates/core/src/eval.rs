//! Detection metrics: greedy IoU matching, precision/recall at the operating
//! point, all-points interpolated AP, mAP@50 and mAP@50-95, and per-stage
//! timing.

use std::fmt::Write as _;
use std::time::{Duration, Instant};

use crate::error::Result;
use crate::geometry::{iou, rank_order, ClassId, Detection};
use crate::ingest::GroundTruthBox;

pub const IOU_50: f64 = 0.5;

/// The ten thresholds 0.50, 0.55, ..., 0.95.
pub fn coco_thresholds() -> [f64; 10] {
    std::array::from_fn(|k| (50 + 5 * k) as f64 / 100.0)
}

/// Outcome of matching one image's detections against its ground truth.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatchResult {
    /// Per detection, in input order.
    pub is_tp: Vec<bool>,
    /// Ground-truth index claimed by each detection.
    pub matched_gt: Vec<Option<usize>>,
    pub false_negatives: usize,
}

impl MatchResult {
    pub fn true_positives(&self) -> usize {
        self.is_tp.iter().filter(|&&t| t).count()
    }

    pub fn false_positives(&self) -> usize {
        self.is_tp.len() - self.true_positives()
    }
}

/// Greedy matching. Detections are visited by descending confidence (box
/// order breaks ties); each takes the unclaimed same-class ground truth with
/// the highest IoU if that IoU reaches `iou_threshold`.
pub fn match_detections(
    detections: &[Detection],
    ground_truth: &[GroundTruthBox],
    iou_threshold: f64,
) -> MatchResult {
    let mut claimed = vec![false; ground_truth.len()];
    let mut matched_gt = vec![None; detections.len()];
    for i in rank_order(detections) {
        let d = &detections[i];
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in ground_truth.iter().enumerate() {
            if claimed[g] || gt.class_id != d.class_id {
                continue;
            }
            let v = iou(&d.bbox, &gt.bbox);
            if v >= iou_threshold && best.is_none_or(|(_, b)| v > b) {
                best = Some((g, v));
            }
        }
        if let Some((g, _)) = best {
            claimed[g] = true;
            matched_gt[i] = Some(g);
        }
    }
    MatchResult {
        is_tp: matched_gt.iter().map(Option::is_some).collect(),
        matched_gt,
        false_negatives: claimed.iter().filter(|&&c| !c).count(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl Counts {
    pub fn merge(self, other: Counts) -> Counts {
        Counts {
            tp: self.tp + other.tp,
            fp: self.fp + other.fp,
            fn_: self.fn_ + other.fn_,
        }
    }
}

/// `P = TP/(TP+FP)`, `R = TP/(TP+FN)`; an empty denominator yields 1.0.
pub fn precision_recall(c: Counts) -> (f64, f64) {
    let p = if c.tp + c.fp == 0 {
        1.0
    } else {
        c.tp as f64 / (c.tp + c.fp) as f64
    };
    let r = if c.tp + c.fn_ == 0 {
        1.0
    } else {
        c.tp as f64 / (c.tp + c.fn_) as f64
    };
    (p, r)
}

/// All-points interpolated AP from TP flags in rank order. Returns `None`
/// when there is no ground truth.
pub fn ap_from_ranked(ranked_tp: &[bool], n_gt: usize) -> Option<f64> {
    if n_gt == 0 {
        return None;
    }
    let mut precision = Vec::with_capacity(ranked_tp.len());
    let mut recall = Vec::with_capacity(ranked_tp.len());
    let mut tp = 0usize;
    for (k, &hit) in ranked_tp.iter().enumerate() {
        tp += usize::from(hit);
        precision.push(tp as f64 / (k + 1) as f64);
        recall.push(tp as f64 / n_gt as f64);
    }
    // Precision envelope: running max from the low-rank end.
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (p, r) in precision.iter().zip(&recall) {
        ap += (r - prev_recall) * p;
        prev_recall = *r;
    }
    Some(ap.clamp(0.0, 1.0))
}

/// One image's worth of evaluation input. Detection confidences are the
/// ranking scores (refined scores when a rescoring stage ran).
#[derive(Debug, Clone, PartialEq)]
pub struct EvalImage {
    pub image_id: String,
    pub ground_truth: Vec<GroundTruthBox>,
    pub detections: Vec<Detection>,
}

struct ClassMatches {
    /// `(score, tp)` in global rank order.
    ranked: Vec<(f64, bool)>,
    counts: Counts,
    n_gt: usize,
}

fn class_matches(images: &[EvalImage], class: ClassId, iou_threshold: f64) -> ClassMatches {
    let mut scored: Vec<(f64, usize, usize, bool)> = Vec::new();
    let mut counts = Counts::default();
    let mut n_gt = 0;
    for (img_idx, img) in images.iter().enumerate() {
        let dets: Vec<Detection> = img
            .detections
            .iter()
            .filter(|d| d.class_id == class)
            .copied()
            .collect();
        let gts: Vec<GroundTruthBox> = img
            .ground_truth
            .iter()
            .filter(|g| g.class_id == class)
            .copied()
            .collect();
        n_gt += gts.len();
        let m = match_detections(&dets, &gts, iou_threshold);
        counts = counts.merge(Counts {
            tp: m.true_positives(),
            fp: m.false_positives(),
            fn_: m.false_negatives,
        });
        for (rank, i) in rank_order(&dets).into_iter().enumerate() {
            scored.push((dets[i].confidence, img_idx, rank, m.is_tp[i]));
        }
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    ClassMatches {
        ranked: scored.into_iter().map(|(s, _, _, tp)| (s, tp)).collect(),
        counts,
        n_gt,
    }
}

/// AP for one class over a dataset; `None` if the class has no ground truth.
pub fn average_precision(images: &[EvalImage], class: ClassId, iou_threshold: f64) -> Option<f64> {
    let m = class_matches(images, class, iou_threshold);
    let flags: Vec<bool> = m.ranked.iter().map(|&(_, tp)| tp).collect();
    ap_from_ranked(&flags, m.n_gt)
}

/// Mean AP over classes that have ground truth; 0.0 if none do.
pub fn mean_ap(images: &[EvalImage], classes: &[ClassId], iou_threshold: f64) -> f64 {
    let aps: Vec<f64> = classes
        .iter()
        .filter_map(|&c| average_precision(images, c, iou_threshold))
        .collect();
    if aps.is_empty() {
        0.0
    } else {
        aps.iter().sum::<f64>() / aps.len() as f64
    }
}

/// Mean over the IoU thresholds 0.50:0.05:0.95 of the class-mean AP.
pub fn map_range(images: &[EvalImage], classes: &[ClassId]) -> f64 {
    let ts = coco_thresholds();
    ts.iter().map(|&t| mean_ap(images, classes, t)).sum::<f64>() / ts.len() as f64
}

/// How detections rejected by the refinement threshold enter AP.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalMode {
    /// Rejected detections are removed before matching.
    Discard,
    /// Every detection is ranked by its refined score; nothing is removed.
    RankAll,
}

impl std::fmt::Display for EvalMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            EvalMode::Discard => "discard",
            EvalMode::RankAll => "rank-all",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassMetrics {
    pub class_id: ClassId,
    pub name: String,
    pub precision: f64,
    pub recall: f64,
    pub ap50: Option<f64>,
    pub counts: Counts,
    pub gt_count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub method: String,
    pub mode: EvalMode,
    pub precision: f64,
    pub recall: f64,
    pub map50: f64,
    pub map50_95: f64,
    pub classes: Vec<ClassMetrics>,
    pub mean_time_ms: Option<f64>,
    pub notes: Vec<String>,
}

pub fn evaluate(
    method: &str,
    mode: EvalMode,
    images: &[EvalImage],
    classes: &[(ClassId, String)],
) -> EvalReport {
    let ids: Vec<ClassId> = classes.iter().map(|(c, _)| *c).collect();
    let mut notes = Vec::new();
    let mut total = Counts::default();
    let mut per_class = Vec::new();
    for (class_id, name) in classes {
        let m = class_matches(images, *class_id, IOU_50);
        let flags: Vec<bool> = m.ranked.iter().map(|&(_, tp)| tp).collect();
        let ap50 = ap_from_ranked(&flags, m.n_gt);
        if ap50.is_none() {
            notes.push(format!(
                "class {name} has no ground truth; excluded from mAP"
            ));
        }
        let (precision, recall) = precision_recall(m.counts);
        total = total.merge(m.counts);
        per_class.push(ClassMetrics {
            class_id: *class_id,
            name: name.clone(),
            precision,
            recall,
            ap50,
            counts: m.counts,
            gt_count: m.n_gt,
        });
    }
    let (precision, recall) = precision_recall(total);
    EvalReport {
        method: method.to_string(),
        mode,
        precision,
        recall,
        map50: mean_ap(images, &ids, IOU_50),
        map50_95: map_range(images, &ids),
        classes: per_class,
        mean_time_ms: None,
        notes,
    }
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    c.next()
        .map(|f| f.to_uppercase().collect::<String>() + c.as_str())
        .unwrap_or_default()
}

/// Metric rows in the order of the comparison tables.
fn metric_rows(r: &EvalReport) -> Vec<(String, Option<f64>)> {
    let mut rows = vec![
        ("Precision @ IOU = 0.5".to_string(), Some(r.precision)),
        ("Recall @ IOU = 0.5".to_string(), Some(r.recall)),
        ("mAP@50".to_string(), Some(r.map50)),
        ("mAP@50-95".to_string(), Some(r.map50_95)),
    ];
    for c in &r.classes {
        let n = capitalize(&c.name);
        rows.push((format!("{n} Precision @ IOU = 0.5"), Some(c.precision)));
        rows.push((format!("{n} Recall @ IOU = 0.5"), Some(c.recall)));
        rows.push((format!("{n} AP@IOU = 0.5"), c.ap50));
    }
    rows.push(("Avg End-to-End Proc. Time (ms)".to_string(), r.mean_time_ms));
    rows
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |v| format!("{v:.6}"))
}

/// CSV with one row per method and one column per metric.
pub fn reports_to_csv(reports: &[EvalReport]) -> String {
    let mut s = String::new();
    let Some(first) = reports.first() else {
        return s;
    };
    let header: Vec<String> = metric_rows(first).into_iter().map(|(n, _)| n).collect();
    let _ = writeln!(s, "method,mode,{}", header.join(","));
    for r in reports {
        let vals: Vec<String> = metric_rows(r)
            .into_iter()
            .map(|(_, v)| fmt_opt(v))
            .collect();
        let _ = writeln!(s, "{},{},{}", r.method, r.mode, vals.join(","));
    }
    s
}

/// Plain-text table with metrics as rows and methods as columns.
pub fn reports_to_text(reports: &[EvalReport]) -> String {
    let mut s = String::new();
    let Some(first) = reports.first() else {
        return s;
    };
    let names: Vec<String> = metric_rows(first).into_iter().map(|(n, _)| n).collect();
    let width = names.iter().map(String::len).max().unwrap_or(0).max(6);
    let _ = write!(s, "{:width$}", "Metric");
    for r in reports {
        let _ = write!(s, " | {:>12}", r.method);
    }
    s.push('\n');
    let cols: Vec<Vec<Option<f64>>> = reports
        .iter()
        .map(|r| metric_rows(r).into_iter().map(|(_, v)| v).collect())
        .collect();
    for (i, name) in names.iter().enumerate() {
        let _ = write!(s, "{name:width$}");
        for c in &cols {
            let v = c.get(i).copied().flatten();
            let _ = write!(
                s,
                " | {:>12}",
                v.map_or("-".to_string(), |v| format!("{v:.3}"))
            );
        }
        s.push('\n');
    }
    for r in reports {
        for n in &r.notes {
            let _ = writeln!(s, "note [{}]: {n}", r.method);
        }
        let _ = writeln!(s, "mode [{}]: {}", r.method, r.mode);
    }
    s
}

// ---------------------------------------------------------------------------
// Timing

/// Accumulates wall time per named stage while one image is processed.
#[derive(Debug, Default)]
pub struct StageClock {
    stages: Vec<(&'static str, Duration)>,
}

impl StageClock {
    pub fn time<T>(&mut self, stage: &'static str, f: impl FnOnce() -> T) -> T {
        let start = Instant::now();
        let out = f();
        let d = start.elapsed();
        match self.stages.iter_mut().find(|(n, _)| *n == stage) {
            Some((_, acc)) => *acc += d,
            None => self.stages.push((stage, d)),
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageTiming {
    pub stage: String,
    pub mean_ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimingReport {
    pub images: usize,
    pub repetitions: usize,
    pub mean_ms: f64,
    pub std_ms: f64,
    pub stages: Vec<StageTiming>,
}

impl TimingReport {
    pub fn coefficient_of_variation(&self) -> f64 {
        if self.mean_ms > 0.0 {
            self.std_ms / self.mean_ms
        } else {
            0.0
        }
    }

    pub fn stage_ms(&self, stage: &str) -> f64 {
        self.stages
            .iter()
            .find(|s| s.stage == stage)
            .map_or(0.0, |s| s.mean_ms)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("stage,mean_ms_per_image\n");
        for st in &self.stages {
            let _ = writeln!(s, "{},{:.6}", st.stage, st.mean_ms);
        }
        if self.images > 0 {
            let _ = writeln!(s, "total,{:.6}", self.mean_ms);
            let _ = writeln!(s, "total_std,{:.6}", self.std_ms);
            let _ = writeln!(s, "total_cv,{:.6}", self.coefficient_of_variation());
        }
        s
    }
}

/// Runs `run(image_index, clock)` over every image once as warm-up, then
/// `repetitions` more times under the clock. Reports per-image mean and
/// standard deviation of the end-to-end time and the per-stage mean.
pub fn time_pipeline<F>(n_images: usize, repetitions: usize, mut run: F) -> Result<TimingReport>
where
    F: FnMut(usize, &mut StageClock) -> Result<()>,
{
    if n_images == 0 || repetitions == 0 {
        return Ok(TimingReport {
            images: n_images,
            repetitions,
            mean_ms: 0.0,
            std_ms: 0.0,
            stages: Vec::new(),
        });
    }
    for i in 0..n_images {
        run(i, &mut StageClock::default())?;
    }
    let mut totals = Vec::with_capacity(n_images * repetitions);
    let mut stage_sums: Vec<(&'static str, f64)> = Vec::new();
    for _ in 0..repetitions {
        for i in 0..n_images {
            let mut clock = StageClock::default();
            let start = Instant::now();
            run(i, &mut clock)?;
            totals.push(start.elapsed().as_secs_f64() * 1e3);
            for (name, d) in clock.stages {
                let ms = d.as_secs_f64() * 1e3;
                match stage_sums.iter_mut().find(|(n, _)| *n == name) {
                    Some((_, acc)) => *acc += ms,
                    None => stage_sums.push((name, ms)),
                }
            }
        }
    }
    let n = totals.len() as f64;
    let mean = totals.iter().sum::<f64>() / n;
    let var = totals.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / n;
    Ok(TimingReport {
        images: n_images,
        repetitions,
        mean_ms: mean,
        std_ms: var.sqrt(),
        stages: stage_sums
            .into_iter()
            .map(|(stage, sum)| StageTiming {
                stage: stage.to_string(),
                mean_ms: sum / n,
            })
            .collect(),
    })
}
