use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::forward::{evaluate_sample, PairSample, SampleLoss};
use super::rpn::{anchors, sample_anchor_targets, AnchorSampling};
use super::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::objective::{assign, AssignConfig, FrameSlot, GroundTruth, LossReport, Roi};
use crate::synthvid::{Annotation, Dataset, VideoSample};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub iterations: usize,
    /// Frame pairs per iteration.
    pub batch_pairs: usize,
    pub lr: f64,
    /// Iteration at which the learning rate drops by `lr_drop`.
    pub lr_step: usize,
    pub lr_drop: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Gradient norm cap; `0` disables clipping.
    pub clip_norm: f64,
    pub seed: u64,
    /// Probability of feeding the same frame twice.
    pub duplicate_prob: f64,
    /// Training pairs use a temporal gap drawn from `1..=max_stride`.
    pub max_stride: usize,
    pub detection_only: bool,
    pub force_best: bool,
    /// Jittered copies of each ground-truth box used as RoIs.
    pub jitter_rois: usize,
    /// Random RoIs per frame.
    pub background_rois: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            iterations: 1500,
            batch_pairs: 2,
            lr: 0.02,
            lr_step: 1100,
            lr_drop: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            clip_norm: 10.0,
            seed: 0,
            duplicate_prob: 0.5,
            max_stride: 1,
            detection_only: false,
            force_best: true,
            jitter_rois: 4,
            background_rois: 8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.batch_pairs == 0 || self.max_stride == 0 {
            return Err(Error::InvalidConfig("batch_pairs and max_stride must be >= 1".into()));
        }
        if !(self.lr >= 0.0 && self.lr_drop >= 0.0 && (0.0..1.0).contains(&self.momentum)) {
            return Err(Error::InvalidConfig("lr, lr_drop must be >= 0 and momentum in [0, 1)".into()));
        }
        if !(0.0..=1.0).contains(&self.duplicate_prob) {
            return Err(Error::InvalidConfig("duplicate_prob must be in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, iteration: usize) -> f64 {
        if iteration < self.lr_step {
            self.lr
        } else {
            self.lr * self.lr_drop
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationLog {
    pub iteration: usize,
    pub lr: f64,
    pub loss: SampleLoss,
}

pub fn ground_truth(anns: &[Annotation]) -> Vec<GroundTruth> {
    anns.iter()
        .map(|a| GroundTruth {
            bbox: a.bbox,
            class: a.class,
            track_id: a.track_id,
        })
        .collect()
}

fn jittered<R: Rng>(b: &BBox, rng: &mut R) -> BBox {
    BBox::new(
        b.x + rng.random_range(-0.3..0.3) * b.w,
        b.y + rng.random_range(-0.3..0.3) * b.h,
        b.w * rng.random_range(-0.3f64..0.3).exp(),
        b.h * rng.random_range(-0.3f64..0.3).exp(),
    )
}

fn sample_rois<R: Rng>(gt: &[GroundTruth], slot: FrameSlot, cfg: &TrainConfig, rng: &mut R) -> Vec<Roi> {
    let (w, h) = (cfg.model.width as f64, cfg.model.height as f64);
    let mut boxes = Vec::new();
    for g in gt {
        boxes.push(g.bbox);
        for _ in 0..cfg.jitter_rois {
            boxes.push(jittered(&g.bbox, rng));
        }
    }
    for _ in 0..cfg.background_rois {
        let bw = rng.random_range(6.0..18.0);
        let bh = rng.random_range(6.0..18.0);
        boxes.push(BBox::new(rng.random_range(0.0..w), rng.random_range(0.0..h), bw, bh));
    }
    boxes
        .into_iter()
        .filter_map(|b| b.clipped(w, h))
        .filter(|b| b.w >= 2.0 && b.h >= 2.0)
        .map(|bbox| Roi { slot, bbox })
        .collect()
}

/// Draws RoIs and anchor targets for the frame pair `(t, t_next)` of `video`.
pub fn build_sample<R: Rng>(
    video: &VideoSample,
    t: usize,
    t_next: usize,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<PairSample> {
    let gt = [ground_truth(&video.annotations[t]), ground_truth(&video.annotations[t_next])];
    let mut rois = sample_rois(&gt[0], FrameSlot::Current, cfg, rng);
    rois.extend(sample_rois(&gt[1], FrameSlot::Next, cfg, rng));
    let assign_cfg = AssignConfig {
        force_best: cfg.force_best,
        track_targets: !cfg.detection_only,
        ..AssignConfig::default()
    };
    let batch = assign(&rois, [&gt[0], &gt[1]], &assign_cfg)?;
    let anchor_boxes = anchors(&cfg.model);
    let sampling = AnchorSampling::default();
    let gt_boxes = |g: &[GroundTruth]| g.iter().map(|x| x.bbox).collect::<Vec<_>>();
    let a0 = sample_anchor_targets(&anchor_boxes, &gt_boxes(&gt[0]), &sampling, rng);
    let a1 = sample_anchor_targets(&anchor_boxes, &gt_boxes(&gt[1]), &sampling, rng);
    Ok(PairSample {
        frames: [video.frames[t].clone(), video.frames[t_next].clone()],
        batch,
        anchors: [a0, a1],
        detection_only: cfg.detection_only,
    })
}

/// Random training pair: a video, a gap `τ`, and with `duplicate_prob` the
/// same frame twice.
pub fn draw_sample<R: Rng>(data: &Dataset, cfg: &TrainConfig, rng: &mut R) -> Result<PairSample> {
    let candidates: Vec<&VideoSample> = data.videos.iter().filter(|v| v.len() >= 2).collect();
    if candidates.is_empty() {
        return Err(Error::InvalidArgument("training needs at least one video with 2 frames".into()));
    }
    let video = candidates[rng.random_range(0..candidates.len())];
    let tau = rng.random_range(1..=cfg.max_stride.min(video.len() - 1));
    let t = rng.random_range(0..video.len() - tau);
    let next = if rng.random::<f64>() < cfg.duplicate_prob { t } else { t + tau };
    build_sample(video, t, next, cfg, rng)
}

fn mean_loss(losses: &[SampleLoss]) -> SampleLoss {
    let n = losses.len().max(1) as f64;
    let mut m = SampleLoss::default();
    let mut det = LossReport::default();
    for l in losses {
        det.cls += l.det.cls / n;
        det.reg += l.det.reg / n;
        det.tra += l.det.tra / n;
        det.total += l.det.total / n;
        det.lambda = l.det.lambda;
        det.n += l.det.n;
        det.n_fg += l.det.n_fg;
        det.n_tra += l.det.n_tra;
        m.rpn += l.rpn / n;
        m.total += l.total / n;
    }
    m.det = det;
    m
}

/// Mean loss over fixed samples, no gradients.
pub fn evaluate_loss(model: &Model, samples: &[PairSample]) -> Result<SampleLoss> {
    let losses = samples
        .par_iter()
        .map(|s| evaluate_sample(model, s, false).map(|e| e.loss))
        .collect::<Result<Vec<_>>>()?;
    Ok(mean_loss(&losses))
}

/// Averaged loss and gradient over a batch; the sum runs in sample order.
pub fn batch_gradient(model: &Model, samples: &[PairSample]) -> Result<(SampleLoss, Model)> {
    let evals = samples
        .par_iter()
        .map(|s| evaluate_sample(model, s, true))
        .collect::<Result<Vec<_>>>()?;
    let mut grad = Model::zeros(&model.config)?;
    let scale = 1.0 / samples.len().max(1) as f64;
    let mut losses = Vec::with_capacity(evals.len());
    for e in evals {
        grad.add_scaled(e.grad.as_ref().expect("gradient requested"), scale);
        losses.push(e.loss);
    }
    Ok((mean_loss(&losses), grad))
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub curve: Vec<IterationLog>,
}

/// SGD with momentum on sampled frame pairs, starting from `init`.
pub fn train_from(init: Model, data: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if init.config != cfg.model {
        return Err(Error::InvalidConfig("initial model does not match the configured architecture".into()));
    }
    let mut model = init;
    let mut velocity = Model::zeros(&cfg.model)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x005E_ED0F_7EA1);
    let mut curve = Vec::with_capacity(cfg.iterations);
    for iteration in 0..cfg.iterations {
        let samples = (0..cfg.batch_pairs)
            .map(|_| draw_sample(data, cfg, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let (loss, mut grad) = match batch_gradient(&model, &samples) {
            Ok(v) => v,
            Err(Error::NonFinite(_)) => {
                return Err(Error::Divergence {
                    iteration,
                    loss: f64::NAN,
                })
            }
            Err(e) => return Err(e),
        };
        if !loss.total.is_finite() || !grad.is_finite() {
            return Err(Error::Divergence {
                iteration,
                loss: loss.total,
            });
        }
        if cfg.clip_norm > 0.0 {
            let norm = grad.squared_norm().sqrt();
            if norm > cfg.clip_norm {
                let s = cfg.clip_norm / norm;
                for t in grad.tensors_mut() {
                    t.iter_mut().for_each(|v| *v *= s);
                }
            }
        }
        let lr = cfg.lr_at(iteration);
        if cfg.weight_decay > 0.0 {
            grad.add_scaled(&model, cfg.weight_decay);
        }
        for (v, g) in velocity.tensors_mut().into_iter().zip(grad.tensors()) {
            for (a, b) in v.iter_mut().zip(g) {
                *a = cfg.momentum * *a + b;
            }
        }
        if lr > 0.0 {
            model.add_scaled(&velocity, -lr);
        }
        curve.push(IterationLog { iteration, lr, loss });
    }
    Ok(TrainOutcome { model, curve })
}

/// Initializes from `cfg.seed` and trains.
pub fn train(data: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    train_from(Model::init(&cfg.model, cfg.seed)?, data, cfg)
}

/// Fixed held-out samples, e.g. for comparing a trained model to its initialization.
pub fn held_out_samples(data: &Dataset, cfg: &TrainConfig, count: usize, seed: u64) -> Result<Vec<PairSample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = TrainConfig {
        duplicate_prob: 0.0,
        ..cfg.clone()
    };
    (0..count).map(|_| draw_sample(data, &cfg, &mut rng)).collect()
}
