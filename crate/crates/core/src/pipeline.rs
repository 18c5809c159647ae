//! Stage glue: turning network output into frame-level or linked detections,
//! weakening a detector on purpose, and scoring videos against ground truth.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::evalmap::{evaluate, EvalConfig, EvalResult, GtBox, ScoredBox};
use crate::linker::{link_video, nms_with_voting, Detection, LinkConfig};
use crate::records::{ScoredRecord, TubeRecord};
use crate::synthvid::VideoSample;
use crate::toynet::{infer_video, Model, VideoInference};

/// Per-class NMS with box voting and no linking: the frame-level baseline.
pub fn frame_level(detections: &[Vec<Detection>], classes: usize, cfg: &LinkConfig) -> Vec<ScoredRecord> {
    let mut out = Vec::new();
    for frame in detections {
        for c in 1..=classes {
            for d in nms_with_voting(frame, c, cfg.nms_iou, cfg.keep) {
                out.push(ScoredRecord {
                    frame: d.frame,
                    class: c,
                    bbox: d.bbox,
                    score: d.score(c),
                    tube: None,
                });
            }
        }
    }
    out
}

/// Tube linking and rescoring for every class of one video.
pub fn link_inference(inf: &VideoInference, classes: usize, cfg: &LinkConfig) -> Result<(Vec<ScoredRecord>, Vec<TubeRecord>)> {
    let linked = link_video(&inf.detections, &inf.tracklets, classes, cfg)?;
    let mut records = Vec::new();
    let mut tubes = Vec::new();
    for cl in &linked {
        let c = cl.class;
        for (k, frame) in cl.frames.iter().enumerate() {
            for (i, d) in frame.iter().enumerate() {
                let tube = cl.tubes.iter().position(|t| t.indices[k] == i);
                records.push(ScoredRecord {
                    frame: d.frame,
                    class: c,
                    bbox: d.bbox,
                    score: d.score(c),
                    tube,
                });
            }
        }
        for (n, t) in cl.tubes.iter().enumerate() {
            tubes.push(TubeRecord {
                class: c,
                tube: n,
                score: t.score,
                frames: t.detections.iter().map(|d| d.frame).collect(),
                boxes: t.detections.iter().map(|d| d.bbox).collect(),
                scores: t.class_scores(),
            });
        }
    }
    records.sort_by_key(|a| (a.frame, a.class));
    Ok((records, tubes))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WeakenConfig {
    /// Fraction of processed frames whose detector output is corrupted.
    pub frame_fraction: f64,
    /// Foreground probabilities in a corrupted frame are multiplied by a
    /// factor drawn uniformly from `[0, max_keep]`; the mass moves to background.
    pub max_keep: f64,
    pub seed: u64,
}

impl Default for WeakenConfig {
    fn default() -> Self {
        WeakenConfig {
            frame_fraction: 0.2,
            max_keep: 0.2,
            seed: 0,
        }
    }
}

/// Dropout-style score corruption on a random subset of processed frames.
/// Returns the corrupted copy and the indices (into `keyframes`) that were hit.
pub fn weaken(inf: &VideoInference, cfg: &WeakenConfig, video: usize) -> (VideoInference, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (video as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let n = inf.detections.len();
    let hit_count = ((cfg.frame_fraction * n as f64).round() as usize).min(n);
    let mut hit = sample(&mut rng, n, hit_count).into_vec();
    hit.sort_unstable();
    let mut out = inf.clone();
    for &k in &hit {
        for d in out.detections[k].iter_mut() {
            let keep = rng.random_range(0.0..=cfg.max_keep);
            let mut moved = 0.0;
            for p in d.scores.iter_mut().skip(1) {
                moved += *p * (1.0 - keep);
                *p *= keep;
            }
            d.scores[0] += moved;
        }
    }
    (out, hit)
}

/// Ground truth of the processed frames only, keyed by `(video, frame)`.
pub fn processed_ground_truth(video_index: usize, video: &VideoSample, keyframes: &[usize]) -> Vec<GtBox> {
    keyframes
        .iter()
        .flat_map(|&t| {
            video.annotations[t].iter().map(move |a| GtBox {
                image: (video_index, t),
                class: a.class,
                bbox: a.bbox,
            })
        })
        .collect()
}

pub fn scored_boxes(video_index: usize, records: &[ScoredRecord]) -> Vec<ScoredBox> {
    records
        .iter()
        .map(|r| ScoredBox {
            image: (video_index, r.frame),
            class: r.class,
            bbox: r.bbox,
            score: r.score,
        })
        .collect()
}

/// Runs the detector over every video at temporal stride `stride`.
pub fn infer_all(model: &Model, videos: &[VideoSample], stride: usize) -> Result<Vec<VideoInference>> {
    videos.par_iter().map(|v| infer_video(model, &v.frames, stride)).collect()
}

/// Frame-level and linked mAP of the same inference output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkResult {
    pub frame: EvalResult,
    pub video: EvalResult,
}

/// Evaluates `inferences[i]` (on `videos[i]`) both without and with linking.
pub fn benchmark(
    videos: &[VideoSample],
    inferences: &[VideoInference],
    classes: usize,
    link: &LinkConfig,
    eval: &EvalConfig,
) -> Result<BenchmarkResult> {
    let per_video = inferences
        .par_iter()
        .enumerate()
        .map(|(i, inf)| {
            let frame = scored_boxes(i, &frame_level(&inf.detections, classes, link));
            let (linked, _) = link_inference(inf, classes, link)?;
            let gt = processed_ground_truth(i, &videos[i], &inf.keyframes);
            Ok((frame, scored_boxes(i, &linked), gt))
        })
        .collect::<Result<Vec<_>>>()?;
    let (mut frame, mut video, mut gt) = (Vec::new(), Vec::new(), Vec::new());
    for (f, v, g) in per_video {
        frame.extend(f);
        video.extend(v);
        gt.extend(g);
    }
    Ok(BenchmarkResult {
        frame: evaluate(&frame, &gt, classes, eval),
        video: evaluate(&video, &gt, classes, eval),
    })
}
