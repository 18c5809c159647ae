use rayon::prelude::*;

use super::forward::{classify_rois, forward_frame, forward_track, track_rois, FrameActivations};
use super::rpn::{proposals_from_map, Proposal, MAX_LOG_SCALE};
use super::Model;
use crate::error::{Error, Result};
use crate::geometry::{decode_box, BBox, TrackDelta};
use crate::linker::{Detection, Tracklet};
use crate::tensorops::FeatureMap;

fn clamp_delta(d: TrackDelta) -> TrackDelta {
    TrackDelta::new(
        d.dx,
        d.dy,
        d.dw.clamp(-MAX_LOG_SCALE, MAX_LOG_SCALE),
        d.dh.clamp(-MAX_LOG_SCALE, MAX_LOG_SCALE),
    )
}

/// Top proposals of one frame.
pub fn propose(model: &Model, frame: &FeatureMap, keep: usize) -> Result<Vec<Proposal>> {
    let acts = forward_frame(model, frame)?;
    Ok(proposals_from_map(&model.config, &acts.rpn, keep, model.config.proposal_nms))
}

/// Proposals classified and regressed: one detection per proposal.
fn detect(model: &Model, frame_index: usize, acts: &FrameActivations) -> Result<Vec<Detection>> {
    let cfg = &model.config;
    let props = proposals_from_map(cfg, &acts.rpn, cfg.proposals, cfg.proposal_nms);
    let boxes: Vec<BBox> = props.iter().map(|p| p.bbox).collect();
    let heads = classify_rois(model, acts, &boxes)?;
    Ok(boxes
        .iter()
        .zip(heads)
        .map(|(b, (probs, delta))| {
            let refined = decode_box(b, &clamp_delta(delta))
                .ok()
                .and_then(|r| r.clipped(cfg.width as f64, cfg.height as f64))
                .filter(|r| r.w >= 1.0 && r.h >= 1.0)
                .unwrap_or(*b);
            Detection::new(frame_index, refined, probs)
        })
        .collect())
}

/// Detections of every processed frame and tracklets between consecutive ones.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoInference {
    pub stride: usize,
    /// Processed frame indices `0, τ, 2τ, ...`.
    pub keyframes: Vec<usize>,
    pub detections: Vec<Vec<Detection>>,
    /// `tracklets[k]` links `keyframes[k]` to `keyframes[k + 1]`.
    pub tracklets: Vec<Vec<Tracklet>>,
}

/// Runs the detector on frames `0, τ, 2τ, ...` and the tracker on each
/// consecutive pair, starting tracklets at the regressed detection boxes.
pub fn infer_video(model: &Model, frames: &[FeatureMap], stride: usize) -> Result<VideoInference> {
    if stride == 0 {
        return Err(Error::InvalidArgument("temporal stride must be >= 1".into()));
    }
    if frames.len() < stride + 1 {
        return Err(Error::InvalidArgument(format!(
            "a {}-frame video is too short for stride {stride}",
            frames.len()
        )));
    }
    let keyframes: Vec<usize> = (0..frames.len()).step_by(stride).collect();
    let per_frame = keyframes
        .par_iter()
        .map(|&t| {
            let acts = forward_frame(model, &frames[t])?;
            let dets = detect(model, t, &acts)?;
            Ok((acts, dets))
        })
        .collect::<Result<Vec<_>>>()?;
    let (w, h) = (model.config.width as f64, model.config.height as f64);
    let tracklets = (0..keyframes.len() - 1)
        .into_par_iter()
        .map(|k| {
            let (a0, dets) = &per_frame[k];
            let (a1, _) = &per_frame[k + 1];
            let track = forward_track(model, a0, a1)?;
            let boxes: Vec<BBox> = dets.iter().map(|d| d.bbox).collect();
            let deltas = track_rois(model, &track, &boxes)?;
            let mut out = Vec::with_capacity(boxes.len());
            for (b, d) in boxes.iter().zip(deltas) {
                let Ok(t) = Tracklet::from_delta(keyframes[k], stride, *b, clamp_delta(d)) else { continue };
                let next_scores = t
                    .box_next
                    .clipped(w, h)
                    .and_then(|nb| classify_rois(model, a1, &[nb]).ok())
                    .map(|mut v| v.remove(0).0);
                out.push(match next_scores {
                    Some(s) => t.with_next_scores(s),
                    None => t,
                });
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(VideoInference {
        stride,
        keyframes,
        detections: per_frame.into_iter().map(|(_, d)| d).collect(),
        tracklets,
    })
}
