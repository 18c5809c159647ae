//! Dense anchor objectness: anchor layout, training targets and proposals.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::ModelConfig;
use crate::geometry::{decode_box, encode_box, BBox, BoxDelta};
use crate::linker::greedy_clusters;
use crate::tensorops::{smooth_l1, smooth_l1_grad, FeatureMap};

/// Limit on predicted log size changes when decoding.
pub(crate) const MAX_LOG_SCALE: f64 = 2.0;

/// Anchors in `(row, col, anchor)` order, centered on the head cells.
pub fn anchors(cfg: &ModelConfig) -> Vec<BBox> {
    let (h, w) = cfg.coarse_size();
    let cell_h = cfg.height as f64 / h as f64;
    let cell_w = cfg.width as f64 / w as f64;
    let mut out = Vec::with_capacity(h * w * cfg.anchors_per_cell());
    for i in 0..h {
        for j in 0..w {
            for &s in &cfg.anchor_sides {
                out.push(BBox::new((j as f64 + 0.5) * cell_w, (i as f64 + 0.5) * cell_h, s, s));
            }
        }
    }
    out
}

/// One sampled anchor of the RPN loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnchorTarget {
    pub anchor: usize,
    pub positive: bool,
    /// Box target for positives.
    pub delta: Option<BoxDelta>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnchorSampling {
    pub positive_iou: f64,
    pub negative_iou: f64,
    pub max_positive: usize,
    pub total: usize,
}

impl Default for AnchorSampling {
    fn default() -> Self {
        AnchorSampling {
            positive_iou: 0.5,
            negative_iou: 0.3,
            max_positive: 16,
            total: 48,
        }
    }
}

/// Labels anchors against `gt` and samples a balanced subset: every anchor
/// with IoU ≥ `positive_iou`, plus the best anchor of each ground-truth box,
/// is positive; anchors below `negative_iou` are negative.
pub fn sample_anchor_targets<R: Rng>(
    anchors: &[BBox],
    gt: &[BBox],
    s: &AnchorSampling,
    rng: &mut R,
) -> Vec<AnchorTarget> {
    let mut best_gt: Vec<(usize, f64)> = vec![(0, 0.0); anchors.len()];
    for (a, anchor) in anchors.iter().enumerate() {
        for (g, b) in gt.iter().enumerate() {
            let o = anchor.iou_unchecked(b);
            if o > best_gt[a].1 {
                best_gt[a] = (g, o);
            }
        }
    }
    let mut positive: Vec<usize> = (0..anchors.len()).filter(|&a| best_gt[a].1 >= s.positive_iou).collect();
    for (g, b) in gt.iter().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for (a, anchor) in anchors.iter().enumerate() {
            let o = anchor.iou_unchecked(b);
            if best.is_none_or(|(_, v)| o > v) {
                best = Some((a, o));
            }
        }
        if let Some((a, o)) = best {
            if o > 0.0 && !positive.contains(&a) {
                best_gt[a] = (g, o);
                positive.push(a);
            }
        }
    }
    positive.sort_unstable();
    let mut negative: Vec<usize> = (0..anchors.len()).filter(|&a| best_gt[a].1 < s.negative_iou).collect();
    positive.shuffle(rng);
    positive.truncate(s.max_positive);
    negative.shuffle(rng);
    negative.truncate(s.total.saturating_sub(positive.len()));

    let mut out: Vec<AnchorTarget> = positive
        .into_iter()
        .map(|a| AnchorTarget {
            anchor: a,
            positive: true,
            delta: encode_box(&anchors[a], &gt[best_gt[a].0]).ok(),
        })
        .chain(negative.into_iter().map(|a| AnchorTarget {
            anchor: a,
            positive: false,
            delta: None,
        }))
        .collect();
    out.sort_by_key(|t| t.anchor);
    out
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn locate(cfg: &ModelConfig, anchor: usize) -> (usize, usize, usize) {
    let a = cfg.anchors_per_cell();
    let w = cfg.coarse_size().1;
    let cell = anchor / a;
    (cell / w, cell % w, anchor % a)
}

/// Mean logistic loss over the sampled anchors plus smooth-L1 box error over
/// the positives divided by their count. Also returns the smooth-L1 branch
/// signature for kink detection.
pub(crate) fn rpn_loss(
    cfg: &ModelConfig,
    out: &FeatureMap,
    targets: &[AnchorTarget],
    grad: Option<&mut FeatureMap>,
) -> (f64, u64) {
    let a_count = cfg.anchors_per_cell();
    let n = targets.len().max(1) as f64;
    let n_pos = targets.iter().filter(|t| t.delta.is_some()).count().max(1) as f64;
    let mut loss = 0.0;
    let mut signature = 0u64;
    let mut grads: Vec<(usize, usize, usize, f64)> = Vec::new();
    for t in targets {
        let (i, j, a) = locate(cfg, t.anchor);
        let z = out.get(i, j, a);
        let y = if t.positive { 1.0 } else { 0.0 };
        loss += (softplus(z) - y * z) / n;
        grads.push((i, j, a, (sigmoid(z) - y) / n));
        if let Some(d) = t.delta {
            for (k, target) in d.to_array().into_iter().enumerate() {
                let ch = a_count + 4 * a + k;
                let e = out.get(i, j, ch) - target;
                loss += smooth_l1(e) / n_pos;
                signature = signature.wrapping_mul(31).wrapping_add(u64::from(e.abs() < 1.0));
                grads.push((i, j, ch, smooth_l1_grad(e) / n_pos));
            }
        }
    }
    if let Some(g) = grad {
        for (i, j, c, v) in grads {
            let idx = g.index(i, j, c);
            g.data_mut()[idx] += v;
        }
    }
    (loss, signature)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub objectness: f64,
}

/// Decodes every anchor, clips it to the image, and keeps the `keep` best
/// after NMS at `nms_iou`.
pub fn proposals_from_map(cfg: &ModelConfig, out: &FeatureMap, keep: usize, nms_iou: f64) -> Vec<Proposal> {
    let a_count = cfg.anchors_per_cell();
    let mut cands: Vec<Proposal> = Vec::new();
    for (idx, anchor) in anchors(cfg).iter().enumerate() {
        let (i, j, a) = locate(cfg, idx);
        let px = out.pixel(i, j);
        let base = a_count + 4 * a;
        let delta = BoxDelta::new(
            px[base],
            px[base + 1],
            px[base + 2].clamp(-MAX_LOG_SCALE, MAX_LOG_SCALE),
            px[base + 3].clamp(-MAX_LOG_SCALE, MAX_LOG_SCALE),
        );
        let Ok(b) = decode_box(anchor, &delta) else { continue };
        let Some(b) = b.clipped(cfg.width as f64, cfg.height as f64) else { continue };
        if b.w < 2.0 || b.h < 2.0 {
            continue;
        }
        cands.push(Proposal {
            bbox: b,
            objectness: sigmoid(px[a]),
        });
    }
    let boxes: Vec<BBox> = cands.iter().map(|p| p.bbox).collect();
    let scores: Vec<f64> = cands.iter().map(|p| p.objectness).collect();
    greedy_clusters(&boxes, &scores, nms_iou, keep)
        .into_iter()
        .map(|(i, _)| cands[i])
        .collect()
}
