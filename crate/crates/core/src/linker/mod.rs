//! Frame-level post-processing and linking of detections into tubes.
//!
//! Detections are first reduced per class with NMS + box voting, then chained
//! across processed frames by a Viterbi search over the linking score
//! `p_i + p_j + ψ`, where `ψ` rewards pairs that a tracklet connects. Finished
//! tubes boost their members' scores by the mean of their top scores.

mod link;
mod nms;
mod rescore;

pub use link::{
    extract_tubes, pair_score, track_links, viterbi_link, ExtractConfig, TRACK_LINK_IOU,
};
pub(crate) use nms::greedy_clusters;
pub use nms::{nms_indices, nms_with_voting, DEFAULT_KEEP, DEFAULT_NMS_IOU};
pub use rescore::{average_tracked_scores, rescore_tube, DEFAULT_ALPHA};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{decode_track, BBox, TrackDelta};

/// Scored box in one frame; `scores` holds the `C + 1` class probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub frame: usize,
    pub bbox: BBox,
    pub scores: Vec<f64>,
}

impl Detection {
    pub fn new(frame: usize, bbox: BBox, scores: Vec<f64>) -> Self {
        Detection { frame, bbox, scores }
    }

    pub fn score(&self, class: usize) -> f64 {
        self.scores.get(class).copied().unwrap_or(0.0)
    }

    /// Checks the detector-output contract: a valid box and probabilities summing to one.
    pub fn validate(&self) -> Result<()> {
        self.bbox.validated()?;
        let sum: f64 = self.scores.iter().sum();
        if (sum - 1.0).abs() > 1e-6 || self.scores.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::InvalidArgument(format!(
                "detection scores {:?} are not a probability vector",
                self.scores
            )));
        }
        Ok(())
    }
}

/// Box at `frame` and its regressed position `stride` frames later.
#[derive(Debug, Clone, PartialEq)]
pub struct Tracklet {
    pub frame: usize,
    pub stride: usize,
    pub box_t: BBox,
    pub delta: TrackDelta,
    pub box_next: BBox,
    /// Classifier scores evaluated at `box_next` in the later frame, when available.
    pub next_scores: Option<Vec<f64>>,
}

impl Tracklet {
    pub fn from_delta(frame: usize, stride: usize, box_t: BBox, delta: TrackDelta) -> Result<Self> {
        if stride == 0 {
            return Err(Error::InvalidArgument("tracklet stride must be >= 1".into()));
        }
        Ok(Tracklet {
            frame,
            stride,
            box_t,
            delta,
            box_next: decode_track(&box_t, &delta)?,
            next_scores: None,
        })
    }

    pub fn with_next_scores(mut self, scores: Vec<f64>) -> Self {
        self.next_scores = Some(scores);
        self
    }
}

/// Chain of one detection per processed frame for a single class.
#[derive(Debug, Clone, PartialEq)]
pub struct Tube {
    pub class: usize,
    pub detections: Vec<Detection>,
    /// Index of each member within its frame's candidate list.
    pub indices: Vec<usize>,
    /// Value of the linking objective along the path.
    pub score: f64,
}

impl Tube {
    pub fn len(&self) -> usize {
        self.detections.len()
    }

    pub fn is_empty(&self) -> bool {
        self.detections.is_empty()
    }

    pub fn class_scores(&self) -> Vec<f64> {
        self.detections.iter().map(|d| d.score(self.class)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LinkConfig {
    pub nms_iou: f64,
    pub keep: usize,
    pub max_tubes: usize,
    pub min_mean_prob: f64,
    pub alpha: f64,
    pub causal: bool,
    /// Average each detection's scores with those of its tracked region first.
    pub average_tracked: bool,
}

impl Default for LinkConfig {
    fn default() -> Self {
        LinkConfig {
            nms_iou: DEFAULT_NMS_IOU,
            keep: DEFAULT_KEEP,
            max_tubes: ExtractConfig::default().max_tubes,
            min_mean_prob: ExtractConfig::default().min_mean_prob,
            alpha: DEFAULT_ALPHA,
            causal: false,
            average_tracked: false,
        }
    }
}

/// Result of linking one class over one video.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassLink {
    pub class: usize,
    /// Post-NMS detections per processed frame; tube members carry rescored class scores.
    pub frames: Vec<Vec<Detection>>,
    pub tubes: Vec<Tube>,
}

/// NMS, tube extraction and rescoring for a single class.
///
/// `frames` are the raw per-frame detections of the processed frames in
/// temporal order, `tracklets[k]` connects `frames[k]` to `frames[k + 1]`.
pub fn link_class(
    frames: &[Vec<Detection>],
    tracklets: &[Vec<Tracklet>],
    class: usize,
    cfg: &LinkConfig,
) -> Result<ClassLink> {
    let averaged;
    let frames = if cfg.average_tracked {
        averaged = (0..frames.len())
            .map(|k| match (tracklets.get(k), frames.get(k + 1)) {
                (Some(t), Some(next)) => average_tracked_scores(&frames[k], t, next),
                _ => frames[k].clone(),
            })
            .collect::<Vec<_>>();
        &averaged[..]
    } else {
        frames
    };
    let mut kept: Vec<Vec<Detection>> = frames
        .iter()
        .map(|f| nms_with_voting(f, class, cfg.nms_iou, cfg.keep))
        .collect();
    let extract = ExtractConfig {
        max_tubes: cfg.max_tubes,
        min_mean_prob: cfg.min_mean_prob,
    };
    let tubes = extract_tubes(&kept, tracklets, class, &extract)?;
    let mut rescored = Vec::with_capacity(tubes.len());
    for tube in &tubes {
        let r = rescore_tube(tube, cfg.alpha, cfg.causal)?;
        for (k, (&idx, det)) in r.indices.iter().zip(&r.detections).enumerate() {
            kept[k][idx].scores[class] = det.scores[class];
        }
        rescored.push(r);
    }
    Ok(ClassLink {
        class,
        frames: kept,
        tubes: rescored,
    })
}

/// Links every foreground class `1..=classes` independently, in parallel.
pub fn link_video(
    frames: &[Vec<Detection>],
    tracklets: &[Vec<Tracklet>],
    classes: usize,
    cfg: &LinkConfig,
) -> Result<Vec<ClassLink>> {
    (1..=classes)
        .into_par_iter()
        .map(|c| link_class(frames, tracklets, c, cfg))
        .collect()
}
