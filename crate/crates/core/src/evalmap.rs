//! VOC-style average precision at IoU 0.5, pooled over all videos per class.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::geometry::BBox;

/// Frame identity `(video, frame)`; matching only happens within one image.
pub type ImageKey = (usize, usize);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredBox {
    pub image: ImageKey,
    pub class: usize,
    pub bbox: BBox,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GtBox {
    pub image: ImageKey,
    pub class: usize,
    pub bbox: BBox,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interpolation {
    /// Area under the monotone precision envelope.
    #[default]
    AllPoints,
    /// Mean of the envelope at recall 0, 0.1, ..., 1.
    ElevenPoint,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub iou_thresh: f64,
    pub interpolation: Interpolation,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            iou_thresh: 0.5,
            interpolation: Interpolation::AllPoints,
        }
    }
}

/// Precision and recall after each ranked detection.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PrCurve {
    pub scores: Vec<f64>,
    pub true_positive: Vec<bool>,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub gt_count: usize,
}

/// Ranks detections of one class and marks each as a true or false positive.
///
/// Detections are visited by descending score (ties in input order); each one
/// claims the unmatched ground truth in its image with the highest IoU, if
/// that IoU is at least `iou_thresh`.
pub fn pr_curve(dets: &[ScoredBox], gts: &[GtBox], iou_thresh: f64) -> PrCurve {
    let mut by_image: BTreeMap<ImageKey, Vec<usize>> = BTreeMap::new();
    for (i, g) in gts.iter().enumerate() {
        by_image.entry(g.image).or_default().push(i);
    }
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));

    let mut used = vec![false; gts.len()];
    let mut curve = PrCurve {
        gt_count: gts.len(),
        ..Default::default()
    };
    let mut tp = 0usize;
    for (rank, &i) in order.iter().enumerate() {
        let d = &dets[i];
        let mut best: Option<(usize, f64)> = None;
        for &g in by_image.get(&d.image).map(Vec::as_slice).unwrap_or(&[]) {
            if used[g] {
                continue;
            }
            let o = d.bbox.iou_unchecked(&gts[g].bbox);
            if o >= iou_thresh && best.is_none_or(|(_, b)| o > b) {
                best = Some((g, o));
            }
        }
        let hit = best.is_some();
        if let Some((g, _)) = best {
            used[g] = true;
            tp += 1;
        }
        curve.scores.push(d.score);
        curve.true_positive.push(hit);
        curve.precision.push(tp as f64 / (rank + 1) as f64);
        curve.recall.push(if gts.is_empty() { 0.0 } else { tp as f64 / gts.len() as f64 });
    }
    curve
}

impl PrCurve {
    /// `None` when there is no ground truth.
    pub fn average_precision(&self, interpolation: Interpolation) -> Option<f64> {
        if self.gt_count == 0 {
            return None;
        }
        // running max from the right gives the precision envelope
        let mut env = self.precision.clone();
        for i in (0..env.len().saturating_sub(1)).rev() {
            env[i] = env[i].max(env[i + 1]);
        }
        let ap = match interpolation {
            Interpolation::AllPoints => {
                let mut ap = 0.0;
                let mut prev = 0.0;
                for (r, p) in self.recall.iter().zip(&env) {
                    ap += (r - prev) * p;
                    prev = *r;
                }
                ap
            }
            Interpolation::ElevenPoint => {
                (0..=10)
                    .map(|t| {
                        let t = t as f64 / 10.0;
                        self.recall
                            .iter()
                            .position(|&r| r >= t - 1e-12)
                            .map_or(0.0, |i| env[i])
                    })
                    .sum::<f64>()
                    / 11.0
            }
        };
        Some(ap.clamp(0.0, 1.0))
    }
}

/// AP of one class; `None` when there is no ground truth.
pub fn average_precision(dets: &[ScoredBox], gts: &[GtBox], cfg: &EvalConfig) -> Option<f64> {
    pr_curve(dets, gts, cfg.iou_thresh).average_precision(cfg.interpolation)
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalResult {
    /// Only classes with at least one ground-truth box.
    pub per_class_ap: BTreeMap<usize, f64>,
    /// Mean over `per_class_ap`; 0 when no class has ground truth.
    pub mean_ap: f64,
    /// `(ground truth count, detection count)` for every class `1..=classes`.
    pub per_class_counts: BTreeMap<usize, (usize, usize)>,
}

/// Per-class AP over the pooled detections of all videos, and their mean.
pub fn evaluate(dets: &[ScoredBox], gts: &[GtBox], classes: usize, cfg: &EvalConfig) -> EvalResult {
    let per_class: Vec<(usize, Option<f64>, usize, usize)> = (1..=classes)
        .into_par_iter()
        .map(|c| {
            let d: Vec<ScoredBox> = dets.iter().filter(|d| d.class == c).copied().collect();
            let g: Vec<GtBox> = gts.iter().filter(|g| g.class == c).copied().collect();
            (c, average_precision(&d, &g, cfg), g.len(), d.len())
        })
        .collect();
    let mut out = EvalResult::default();
    for (c, ap, ng, nd) in per_class {
        out.per_class_counts.insert(c, (ng, nd));
        if let Some(ap) = ap {
            out.per_class_ap.insert(c, ap);
        }
    }
    if !out.per_class_ap.is_empty() {
        out.mean_ap = out.per_class_ap.values().sum::<f64>() / out.per_class_ap.len() as f64;
    }
    out
}
