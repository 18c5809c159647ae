use super::{Detection, Tracklet, Tube};
use crate::error::{Error, Result};

use super::link::TRACK_LINK_IOU;

/// Fraction of a tube's highest scores averaged into the boost.
pub const DEFAULT_ALPHA: f64 = 0.5;

fn top_mean(scores: &[f64], alpha: f64) -> f64 {
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    // guard against 0.5 * 4 landing a hair above 2
    let n = ((alpha * sorted.len() as f64 - 1e-9).ceil() as usize).clamp(1, sorted.len());
    sorted[..n].iter().sum::<f64>() / n as f64
}

/// Adds the mean of the top `⌈α · len⌉` class scores of the tube to every member.
///
/// With `causal` the boost for frame `k` only looks at members `0..=k`, as an
/// online tracker would.
pub fn rescore_tube(tube: &Tube, alpha: f64, causal: bool) -> Result<Tube> {
    if tube.is_empty() {
        return Err(Error::InvalidArgument("cannot rescore an empty tube".into()));
    }
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::InvalidArgument(format!("alpha must be in (0, 1], got {alpha}")));
    }
    let scores = tube.class_scores();
    let whole = top_mean(&scores, alpha);
    let mut out = tube.clone();
    for (k, det) in out.detections.iter_mut().enumerate() {
        let boost = if causal { top_mean(&scores[..=k], alpha) } else { whole };
        det.scores[tube.class] = scores[k] + boost;
    }
    Ok(out)
}

/// Averages each detection's scores with the scores found at its tracked position.
///
/// A detection at `t` looks for a tracklet starting on it (IoU above
/// [`TRACK_LINK_IOU`]). The partner scores come from the tracklet's own
/// `next_scores` when present, otherwise from the best-overlapping detection
/// in `dets_next`. Detections without a partner are returned unchanged.
pub fn average_tracked_scores(dets_t: &[Detection], tracklets: &[Tracklet], dets_next: &[Detection]) -> Vec<Detection> {
    dets_t
        .iter()
        .map(|d| {
            let Some(tr) = best_overlap(d, tracklets) else {
                return d.clone();
            };
            let partner = tr.next_scores.clone().or_else(|| {
                dets_next
                    .iter()
                    .map(|n| (n.bbox.iou_unchecked(&tr.box_next), n))
                    .filter(|(o, _)| *o > TRACK_LINK_IOU)
                    .max_by(|a, b| a.0.total_cmp(&b.0))
                    .map(|(_, n)| n.scores.clone())
            });
            match partner {
                Some(p) if p.len() == d.scores.len() => {
                    let mut out = d.clone();
                    for (s, q) in out.scores.iter_mut().zip(&p) {
                        *s = 0.5 * (*s + q);
                    }
                    out
                }
                _ => d.clone(),
            }
        })
        .collect()
}

fn best_overlap<'a>(d: &Detection, tracklets: &'a [Tracklet]) -> Option<&'a Tracklet> {
    tracklets
        .iter()
        .map(|t| (d.bbox.iou_unchecked(&t.box_t), t))
        .filter(|(o, _)| *o > TRACK_LINK_IOU)
        .max_by(|a, b| a.0.total_cmp(&b.0))
        .map(|(_, t)| t)
}
