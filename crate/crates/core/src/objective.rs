//! RoI-to-ground-truth assignment and the joint detection + tracking loss.
//!
//! The loss over a two-frame batch is
//! `cls + λ·reg + λ·tra`, where `cls` is the mean cross-entropy over all `N`
//! RoIs, `reg` the smooth-L1 box error summed over foreground RoIs divided by
//! `N_fg`, and `tra` the smooth-L1 track error divided by `N_tra`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{encode_box, encode_track, BBox, BoxDelta, TrackDelta};
use crate::tensorops::{smooth_l1, smooth_l1_grad};

/// Which frame of the pair an RoI belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FrameSlot {
    Current,
    Next,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Roi {
    pub slot: FrameSlot,
    pub bbox: BBox,
}

/// Annotated object: class `1..=C` and a per-video track identity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub bbox: BBox,
    pub class: usize,
    pub track_id: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AssignConfig {
    pub iou_threshold: f64,
    /// Give every ground-truth box its best-overlapping RoI even below the threshold.
    pub force_best: bool,
    /// Create tracking targets; off for detection-only training.
    pub track_targets: bool,
}

impl Default for AssignConfig {
    fn default() -> Self {
        AssignConfig {
            iou_threshold: 0.5,
            force_best: true,
            track_targets: true,
        }
    }
}

impl AssignConfig {
    /// Only the overlap threshold decides labels.
    pub fn strict() -> Self {
        AssignConfig {
            force_best: false,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackTarget {
    /// Index of the frame-`t` RoI that carries the target.
    pub roi: usize,
    pub target: TrackDelta,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoiBatch {
    pub rois: Vec<Roi>,
    /// `0` is background.
    pub labels: Vec<usize>,
    /// Ground-truth index each foreground RoI was matched to.
    pub matched: Vec<Option<usize>>,
    pub box_targets: Vec<Option<BoxDelta>>,
    pub track_targets: Vec<TrackTarget>,
}

impl RoiBatch {
    pub fn n(&self) -> usize {
        self.rois.len()
    }

    pub fn n_fg(&self) -> usize {
        self.labels.iter().filter(|&&c| c > 0).count()
    }

    pub fn n_tra(&self) -> usize {
        self.track_targets.len()
    }
}

/// Labels each RoI against the ground truth of its own frame.
///
/// `gt` holds the annotations of frame `t` and frame `t + τ`. Ties in overlap
/// go to the lowest ground-truth index.
pub fn assign(rois: &[Roi], gt: [&[GroundTruth]; 2], cfg: &AssignConfig) -> Result<RoiBatch> {
    let n = rois.len();
    let mut labels = vec![0usize; n];
    let mut matched = vec![None; n];
    let slot_gt = |s: FrameSlot| match s {
        FrameSlot::Current => gt[0],
        FrameSlot::Next => gt[1],
    };

    let mut best_iou = vec![0.0f64; n];
    for (r, roi) in rois.iter().enumerate() {
        roi.bbox.validated()?;
        let mut best: Option<(usize, f64)> = None;
        for (g, obj) in slot_gt(roi.slot).iter().enumerate() {
            let o = crate::geometry::iou(&roi.bbox, &obj.bbox)?;
            if best.is_none_or(|(_, b)| o > b) {
                best = Some((g, o));
            }
        }
        if let Some((g, o)) = best {
            best_iou[r] = o;
            if o >= cfg.iou_threshold {
                labels[r] = slot_gt(roi.slot)[g].class;
                matched[r] = Some(g);
            }
        }
    }

    if cfg.force_best {
        for slot in [FrameSlot::Current, FrameSlot::Next] {
            for (g, obj) in slot_gt(slot).iter().enumerate() {
                let mut best: Option<(usize, f64)> = None;
                for (r, roi) in rois.iter().enumerate().filter(|(_, r)| r.slot == slot) {
                    let o = roi.bbox.iou_unchecked(&obj.bbox);
                    if best.is_none_or(|(_, b)| o > b) {
                        best = Some((r, o));
                    }
                }
                if let Some((r, o)) = best {
                    if o > 0.0 && best_iou[r] < cfg.iou_threshold && matched[r].is_none() {
                        labels[r] = obj.class;
                        matched[r] = Some(g);
                    }
                }
            }
        }
    }

    let mut box_targets = vec![None; n];
    let mut track_targets = Vec::new();
    for r in 0..n {
        let Some(g) = matched[r] else { continue };
        let obj = &slot_gt(rois[r].slot)[g];
        box_targets[r] = Some(encode_box(&rois[r].bbox, &obj.bbox)?);
        if cfg.track_targets && rois[r].slot == FrameSlot::Current {
            if let Some(next) = gt[1].iter().find(|o| o.track_id == obj.track_id) {
                track_targets.push(TrackTarget {
                    roi: r,
                    target: encode_track(&obj.bbox, &next.bbox)?,
                });
            }
        }
    }

    Ok(RoiBatch {
        rois: rois.to_vec(),
        labels,
        matched,
        box_targets,
        track_targets,
    })
}

/// Network outputs consumed by the loss.
#[derive(Debug, Clone, PartialEq)]
pub struct Predictions {
    /// Softmax probabilities per RoI, length `C + 1`.
    pub probs: Vec<Vec<f64>>,
    /// Box deltas per RoI; background entries are ignored.
    pub box_deltas: Vec<BoxDelta>,
    /// One per track target, in the batch's order.
    pub track_deltas: Vec<TrackDelta>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionGrads {
    pub probs: Vec<Vec<f64>>,
    pub box_deltas: Vec<[f64; 4]>,
    pub track_deltas: Vec<[f64; 4]>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub cls: f64,
    pub reg: f64,
    pub tra: f64,
    pub total: f64,
    pub lambda: f64,
    pub n: usize,
    pub n_fg: usize,
    pub n_tra: usize,
}

/// `λ = 1`.
pub const DEFAULT_LAMBDA: f64 = 1.0;

fn check(batch: &RoiBatch, preds: &Predictions) -> Result<()> {
    if preds.probs.len() != batch.n() || preds.box_deltas.len() != batch.n() {
        return Err(Error::ShapeMismatch(format!(
            "{} probability rows and {} box deltas for {} RoIs",
            preds.probs.len(),
            preds.box_deltas.len(),
            batch.n()
        )));
    }
    if preds.track_deltas.len() != batch.n_tra() {
        return Err(Error::ShapeMismatch(format!(
            "{} track deltas for {} track targets",
            preds.track_deltas.len(),
            batch.n_tra()
        )));
    }
    for (roi, (p, &c)) in preds.probs.iter().zip(&batch.labels).enumerate() {
        let prob = *p.get(c).ok_or_else(|| {
            Error::ShapeMismatch(format!("RoI {roi} has {} class scores, label {c}", p.len()))
        })?;
        if !(prob > 0.0 && prob <= 1.0) {
            return Err(Error::InvalidProbability { roi, class: c, prob });
        }
    }
    Ok(())
}

fn delta_error(pred: &TrackDelta, target: &TrackDelta) -> [f64; 4] {
    let (p, t) = (pred.to_array(), target.to_array());
    [p[0] - t[0], p[1] - t[1], p[2] - t[2], p[3] - t[3]]
}

pub fn loss(batch: &RoiBatch, preds: &Predictions, lambda: f64) -> Result<LossReport> {
    check(batch, preds)?;
    let (n, n_fg, n_tra) = (batch.n(), batch.n_fg(), batch.n_tra());
    let cls = if n == 0 {
        0.0
    } else {
        preds
            .probs
            .iter()
            .zip(&batch.labels)
            .map(|(p, &c)| -p[c].ln())
            .sum::<f64>()
            / n as f64
    };
    let mut reg = 0.0;
    for r in 0..n {
        if batch.labels[r] == 0 {
            continue;
        }
        if let Some(t) = &batch.box_targets[r] {
            reg += delta_error(&preds.box_deltas[r], t).iter().map(|e| smooth_l1(*e)).sum::<f64>();
        }
    }
    if n_fg > 0 {
        reg /= n_fg as f64;
    }
    let mut tra = 0.0;
    for (t, pred) in batch.track_targets.iter().zip(&preds.track_deltas) {
        tra += delta_error(pred, &t.target).iter().map(|e| smooth_l1(*e)).sum::<f64>();
    }
    if n_tra > 0 {
        tra /= n_tra as f64;
    }
    Ok(LossReport {
        cls,
        reg,
        tra,
        total: cls + lambda * reg + lambda * tra,
        lambda,
        n,
        n_fg,
        n_tra,
    })
}

/// Analytic gradient of [`loss`]'s total w.r.t. every prediction.
pub fn loss_backward(batch: &RoiBatch, preds: &Predictions, lambda: f64) -> Result<PredictionGrads> {
    check(batch, preds)?;
    let (n, n_fg, n_tra) = (batch.n(), batch.n_fg(), batch.n_tra());
    let mut grads = PredictionGrads {
        probs: preds.probs.iter().map(|p| vec![0.0; p.len()]).collect(),
        box_deltas: vec![[0.0; 4]; n],
        track_deltas: vec![[0.0; 4]; n_tra],
    };
    for r in 0..n {
        let c = batch.labels[r];
        grads.probs[r][c] = -1.0 / (n as f64 * preds.probs[r][c]);
        if c == 0 {
            continue;
        }
        if let Some(t) = &batch.box_targets[r] {
            let e = delta_error(&preds.box_deltas[r], t);
            for (g, e) in grads.box_deltas[r].iter_mut().zip(e) {
                *g = lambda * smooth_l1_grad(e) / n_fg as f64;
            }
        }
    }
    for (i, (t, pred)) in batch.track_targets.iter().zip(&preds.track_deltas).enumerate() {
        let e = delta_error(pred, &t.target);
        for (g, e) in grads.track_deltas[i].iter_mut().zip(e) {
            *g = lambda * smooth_l1_grad(e) / n_tra as f64;
        }
    }
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensorops::{grad_check, Differentiable};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn gt(x: f64, y: f64, s: f64, class: usize, track_id: u64) -> GroundTruth {
        GroundTruth {
            bbox: BBox::new(x, y, s, s),
            class,
            track_id,
        }
    }

    fn roi(slot: FrameSlot, b: BBox) -> Roi {
        Roi { slot, bbox: b }
    }

    #[test]
    fn exact_roi_takes_class_and_zero_delta() {
        let g = [gt(10.0, 10.0, 8.0, 2, 7)];
        let batch = assign(
            &[roi(FrameSlot::Current, g[0].bbox)],
            [&g, &[]],
            &AssignConfig::strict(),
        )
        .unwrap();
        assert_eq!(batch.labels, vec![2]);
        assert_eq!(batch.box_targets[0], Some(TrackDelta::ZERO));
        // no counterpart in the next frame
        assert_eq!(batch.n_tra(), 0);
    }

    #[test]
    fn low_overlap_is_background_in_strict_mode() {
        let g = [gt(0.0, 0.0, 10.0, 1, 0)];
        // same height, shifted so that IoU = 0.4: overlap 10 * w, union 10 * (20 - w)
        let w = 40.0 / 7.0;
        let r = roi(FrameSlot::Current, BBox::new(10.0 - w, 0.0, 10.0, 10.0));
        let o = crate::geometry::iou(&r.bbox, &g[0].bbox).unwrap();
        assert!((o - 0.4).abs() < 1e-12);
        let batch = assign(&[r], [&g, &[]], &AssignConfig::strict()).unwrap();
        assert_eq!(batch.labels, vec![0]);
        assert_eq!(batch.n_fg(), 0);
        // with forcing on, the only RoI becomes the object's match
        let forced = assign(&[r], [&g, &[]], &AssignConfig::default()).unwrap();
        assert_eq!(forced.labels, vec![1]);
    }

    #[test]
    fn track_targets_need_both_frames() {
        let cur = [gt(10.0, 10.0, 8.0, 1, 1), gt(30.0, 30.0, 8.0, 2, 2)];
        let next = [GroundTruth {
            bbox: BBox::new(12.0, 10.0, 8.0, 8.0),
            ..cur[0]
        }];
        let rois = [
            roi(FrameSlot::Current, cur[0].bbox),
            roi(FrameSlot::Current, cur[1].bbox),
            roi(FrameSlot::Next, next[0].bbox),
        ];
        let batch = assign(&rois, [&cur, &next], &AssignConfig::strict()).unwrap();
        assert_eq!(batch.labels, vec![1, 2, 1]);
        assert_eq!(batch.n_tra(), 1);
        assert_eq!(batch.track_targets[0].roi, 0);
        assert!((batch.track_targets[0].target.dx - 0.25).abs() < 1e-15);
        assert!(batch.n_tra() <= batch.n_fg());

        let cfg = AssignConfig {
            track_targets: false,
            ..AssignConfig::strict()
        };
        assert_eq!(assign(&rois, [&cur, &next], &cfg).unwrap().n_tra(), 0);
    }

    #[test]
    fn ties_go_to_lowest_ground_truth_index() {
        let g = [gt(10.0, 10.0, 8.0, 1, 0), gt(10.0, 10.0, 8.0, 3, 1)];
        let batch = assign(&[roi(FrameSlot::Current, g[0].bbox)], [&g, &[]], &AssignConfig::strict()).unwrap();
        assert_eq!(batch.labels, vec![1]);
        assert_eq!(batch.matched, vec![Some(0)]);
    }

    #[test]
    fn empty_ground_truth_is_all_background() {
        let rois = [roi(FrameSlot::Current, BBox::new(1.0, 1.0, 2.0, 2.0))];
        let batch = assign(&rois, [&[], &[]], &AssignConfig::default()).unwrap();
        assert_eq!(batch.labels, vec![0]);
    }

    fn single_fg_batch() -> RoiBatch {
        let g = [gt(10.0, 10.0, 8.0, 1, 1)];
        let next = [gt(11.0, 10.0, 8.0, 1, 1)];
        assign(&[roi(FrameSlot::Current, g[0].bbox)], [&g, &next], &AssignConfig::strict()).unwrap()
    }

    #[test]
    fn perfect_predictions_cost_nothing() {
        let batch = single_fg_batch();
        let preds = Predictions {
            probs: vec![vec![0.0, 1.0]],
            box_deltas: vec![batch.box_targets[0].unwrap()],
            track_deltas: vec![batch.track_targets[0].target],
        };
        let l = loss(&batch, &preds, 1.0).unwrap();
        assert_eq!(l.total, 0.0);
        let g = loss_backward(&batch, &preds, 1.0).unwrap();
        assert_eq!(g.box_deltas[0], [0.0; 4]);
        assert_eq!(g.track_deltas[0], [0.0; 4]);
    }

    #[test]
    fn loss_fixtures() {
        let batch = single_fg_batch();
        let mut preds = Predictions {
            probs: vec![vec![0.5, 0.5]],
            box_deltas: vec![batch.box_targets[0].unwrap()],
            track_deltas: vec![batch.track_targets[0].target],
        };
        let l = loss(&batch, &preds, 1.0).unwrap();
        assert!((l.total - 2f64.ln()).abs() < 1e-15);
        let g = loss_backward(&batch, &preds, 1.0).unwrap();
        assert_eq!(g.probs[0][1], -1.0 / (1.0 * 0.5));

        preds.probs = vec![vec![0.0, 1.0]];
        preds.track_deltas[0].dx += 0.5;
        let l = loss(&batch, &preds, 1.0).unwrap();
        assert_eq!(l.tra, 0.125);
        assert_eq!(l.total, 0.125);
        assert_eq!(l.lambda, 1.0);
    }

    #[test]
    fn empty_terms_are_zero() {
        let rois = [roi(FrameSlot::Current, BBox::new(1.0, 1.0, 2.0, 2.0))];
        let batch = assign(&rois, [&[], &[]], &AssignConfig::default()).unwrap();
        let preds = Predictions {
            probs: vec![vec![0.25, 0.75]],
            box_deltas: vec![TrackDelta::new(5.0, 5.0, 5.0, 5.0)],
            track_deltas: vec![],
        };
        let l = loss(&batch, &preds, 1.0).unwrap();
        assert_eq!((l.reg, l.tra), (0.0, 0.0));
        assert!((l.cls + 0.25f64.ln()).abs() < 1e-15);
        let g = loss_backward(&batch, &preds, 1.0).unwrap();
        // background RoIs get no box gradient
        assert_eq!(g.box_deltas[0], [0.0; 4]);
    }

    #[test]
    fn rejects_bad_inputs() {
        let batch = single_fg_batch();
        let ok = Predictions {
            probs: vec![vec![0.5, 0.5]],
            box_deltas: vec![TrackDelta::ZERO],
            track_deltas: vec![TrackDelta::ZERO],
        };
        let mut zero_prob = ok.clone();
        zero_prob.probs[0] = vec![1.0, 0.0];
        assert!(matches!(
            loss(&batch, &zero_prob, 1.0),
            Err(Error::InvalidProbability { roi: 0, class: 1, .. })
        ));
        let mut short = ok.clone();
        short.track_deltas.clear();
        assert!(matches!(loss(&batch, &short, 1.0), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn duplicating_rois_keeps_terms() {
        let batch = single_fg_batch();
        let preds = Predictions {
            probs: vec![vec![0.3, 0.7]],
            box_deltas: vec![TrackDelta::new(0.1, -0.2, 0.3, 0.0)],
            track_deltas: vec![TrackDelta::new(0.4, 0.0, -0.1, 0.2)],
        };
        let base = loss(&batch, &preds, 1.0).unwrap();
        let mut dup = batch.clone();
        dup.rois.push(batch.rois[0]);
        dup.labels.push(batch.labels[0]);
        dup.matched.push(batch.matched[0]);
        dup.box_targets.push(batch.box_targets[0]);
        dup.track_targets.push(TrackTarget { roi: 1, ..batch.track_targets[0].clone() });
        let dup_preds = Predictions {
            probs: vec![preds.probs[0].clone(); 2],
            box_deltas: vec![preds.box_deltas[0]; 2],
            track_deltas: vec![preds.track_deltas[0]; 2],
        };
        let l = loss(&dup, &dup_preds, 1.0).unwrap();
        for (a, b) in [(l.cls, base.cls), (l.reg, base.reg), (l.tra, base.tra)] {
            assert!((a - b).abs() < 1e-15);
        }
    }

    /// Loss as a function of all predictions flattened: probs, box deltas, track deltas.
    struct FlatLoss {
        batch: RoiBatch,
        classes: usize,
    }

    impl FlatLoss {
        fn unflatten(&self, x: &[f64]) -> Predictions {
            let n = self.batch.n();
            let c = self.classes;
            let probs = (0..n).map(|r| x[r * c..(r + 1) * c].to_vec()).collect();
            let off = n * c;
            let box_deltas = (0..n)
                .map(|r| TrackDelta::from(<[f64; 4]>::try_from(&x[off + 4 * r..off + 4 * r + 4]).unwrap()))
                .collect();
            let off = off + 4 * n;
            let track_deltas = (0..self.batch.n_tra())
                .map(|t| TrackDelta::from(<[f64; 4]>::try_from(&x[off + 4 * t..off + 4 * t + 4]).unwrap()))
                .collect();
            Predictions {
                probs,
                box_deltas,
                track_deltas,
            }
        }

        fn smooth_l1_branches(&self, x: &[f64]) -> u64 {
            let p = self.unflatten(x);
            let mut h = 0u64;
            let mut push = |e: f64| h = h.wrapping_mul(3).wrapping_add((e.abs() < 1.0) as u64);
            for (r, t) in self.batch.box_targets.iter().enumerate() {
                if let Some(t) = t {
                    delta_error(&p.box_deltas[r], t).iter().for_each(|e| push(*e));
                }
            }
            for (t, d) in self.batch.track_targets.iter().zip(&p.track_deltas) {
                delta_error(d, &t.target).iter().for_each(|e| push(*e));
            }
            h
        }
    }

    impl Differentiable for FlatLoss {
        fn forward(&self, x: &[f64]) -> Result<f64> {
            Ok(loss(&self.batch, &self.unflatten(x), 1.0)?.total)
        }
        fn backward(&self, x: &[f64]) -> Result<Vec<f64>> {
            let g = loss_backward(&self.batch, &self.unflatten(x), 1.0)?;
            let mut out: Vec<f64> = g.probs.concat();
            out.extend(g.box_deltas.iter().flatten());
            out.extend(g.track_deltas.iter().flatten());
            Ok(out)
        }
        fn regime(&self, x: &[f64]) -> Option<u64> {
            Some(self.smooth_l1_branches(x))
        }
    }

    #[test]
    fn gradient_matches_finite_differences_on_random_batch() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let cur = [gt(10.0, 10.0, 8.0, 1, 1), gt(25.0, 20.0, 10.0, 2, 2)];
        let next = [gt(11.0, 10.5, 8.5, 1, 1), gt(40.0, 40.0, 6.0, 3, 3)];
        let rois: Vec<Roi> = (0..8)
            .map(|i| {
                let slot = if i < 5 { FrameSlot::Current } else { FrameSlot::Next };
                let base = if i % 2 == 0 { cur[0].bbox } else { next[1].bbox };
                let j = rng.random_range(-1.5..1.5);
                roi(slot, BBox::new(base.x + j, base.y - j, base.w + j.abs(), base.h))
            })
            .collect();
        let batch = assign(&rois, [&cur, &next], &AssignConfig::default()).unwrap();
        assert!(batch.n_fg() > 0 && batch.n_tra() > 0);
        let classes = 4;
        let mut x = Vec::new();
        for _ in 0..8 {
            x.extend((0..classes).map(|_| rng.random_range(0.2..0.9)));
        }
        x.extend((0..4 * 8 + 4 * batch.n_tra()).map(|_| rng.random_range(-1.8..1.8)));
        let f = FlatLoss { batch, classes };
        let r = grad_check(&f, &x, 1e-3).unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
        assert!(r.checked > r.skipped);
    }
}
