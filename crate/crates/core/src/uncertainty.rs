//! Cross-pass confidence spread for each primary-pass detection.
//!
//! Every detection of the primary pass is associated with at most one
//! detection in each additional dropout pass; the resulting list of
//! confidences (primary first, 0.0 for passes with no counterpart) yields the
//! mean/variance pair fed to the refinement network. The variance is centered
//! on the primary confidence itself, not on the sample mean of the passes.

use crate::error::{Error, Result};
use crate::geometry::{iou, rank_order};
use crate::ingest::PassDetections;

pub const DEFAULT_MATCH_IOU: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UncertaintyEstimate {
    pub mean_confidence: f64,
    pub variance: f64,
    /// Passes (primary included) that contributed a matched confidence.
    pub matched_passes: usize,
}

/// For each primary detection (in input order), the confidences observed
/// across passes: the primary confidence first, then one entry per pass in
/// `others` order. A pass without a counterpart contributes 0.0.
///
/// Within each other pass, primaries claim counterparts greedily in
/// descending confidence order; a primary takes the unclaimed same-class
/// detection with the highest IoU, provided it reaches `iou_threshold`.
pub fn match_across_passes(
    primary: &PassDetections,
    others: &[PassDetections],
    iou_threshold: f64,
) -> Vec<Vec<f64>> {
    associate(primary, others, iou_threshold)
        .into_iter()
        .zip(&primary.detections)
        .map(|(found, d)| {
            std::iter::once(d.confidence)
                .chain(found.into_iter().map(|c| c.unwrap_or(0.0)))
                .collect()
        })
        .collect()
}

/// Per primary detection, the matched confidence in each other pass.
fn associate(
    primary: &PassDetections,
    others: &[PassDetections],
    iou_threshold: f64,
) -> Vec<Vec<Option<f64>>> {
    let dets = &primary.detections;
    let mut out = vec![Vec::with_capacity(others.len()); dets.len()];
    let order = rank_order(dets);

    for pass in others {
        let mut claimed = vec![false; pass.detections.len()];
        let mut found = vec![None; dets.len()];
        for &i in &order {
            let d = &dets[i];
            let mut best: Option<(usize, f64)> = None;
            for (j, cand) in pass.detections.iter().enumerate() {
                if claimed[j] || cand.class_id != d.class_id {
                    continue;
                }
                let v = iou(&d.bbox, &cand.bbox);
                if v >= iou_threshold && best.is_none_or(|(_, b)| v > b) {
                    best = Some((j, v));
                }
            }
            if let Some((j, _)) = best {
                claimed[j] = true;
                found[i] = Some(pass.detections[j].confidence);
            }
        }
        for (list, c) in out.iter_mut().zip(found) {
            list.push(c);
        }
    }
    out
}

/// Mean is the primary confidence; variance is `(1/N) * sum_j (c_j - c_i)^2`
/// over all `N` pass confidences, primary included.
pub fn estimate(primary_confidence: f64, pass_confidences: &[f64]) -> Result<UncertaintyEstimate> {
    if pass_confidences.is_empty() {
        return Err(Error::Contract(
            "pass confidences must include the primary confidence".into(),
        ));
    }
    let mu = primary_confidence;
    let n = pass_confidences.len() as f64;
    let variance = pass_confidences
        .iter()
        .map(|c| (c - mu) * (c - mu))
        .sum::<f64>()
        / n;
    Ok(UncertaintyEstimate {
        mean_confidence: mu,
        variance,
        matched_passes: pass_confidences.len(),
    })
}

/// Estimates for every primary detection, with `matched_passes` counting
/// only passes that produced a counterpart.
pub fn estimate_all(
    primary: &PassDetections,
    others: &[PassDetections],
    iou_threshold: f64,
) -> Vec<UncertaintyEstimate> {
    associate(primary, others, iou_threshold)
        .into_iter()
        .zip(&primary.detections)
        .map(|(found, d)| {
            let matched = 1 + found.iter().filter(|c| c.is_some()).count();
            let list: Vec<f64> = std::iter::once(d.confidence)
                .chain(found.into_iter().map(|c| c.unwrap_or(0.0)))
                .collect();
            let mut e = estimate(d.confidence, &list).expect("list holds the primary confidence");
            e.matched_passes = matched;
            e
        })
        .collect()
}
