use std::hash::{DefaultHasher, Hash, Hasher};

use super::rpn::{rpn_loss, AnchorTarget};
use super::Model;
use crate::error::{Error, Result};
use crate::geometry::{BBox, BoxDelta, TrackDelta};
use crate::objective::{loss, loss_backward, FrameSlot, LossReport, Predictions, RoiBatch, DEFAULT_LAMBDA};
use crate::tensorops::{
    correlate, correlate_backward, psroi_pool, psroi_pool_backward, relu, relu_backward, softmax, softmax_backward,
    ConvGrad, Conv2d, FeatureMap, PoolMode, PooledRoi,
};

/// Cached activations of one frame.
#[derive(Debug, Clone)]
pub struct FrameActivations {
    pub input: FeatureMap,
    /// Post-relu outputs of the four backbone stages.
    pub stages: [FeatureMap; 4],
    pub rpn: FeatureMap,
    pub cls: FeatureMap,
    pub reg: FeatureMap,
}

impl FrameActivations {
    pub fn fine(&self) -> &FeatureMap {
        &self.stages[1]
    }

    pub fn coarse(&self) -> &FeatureMap {
        &self.stages[3]
    }

    fn relu_signature(&self, h: &mut DefaultHasher) {
        for s in &self.stages {
            for v in s.data() {
                (*v > 0.0).hash(h);
            }
        }
    }
}

/// Runs the backbone and the per-frame heads. Pixels are centered on 0.5.
pub fn forward_frame(model: &Model, frame: &FeatureMap) -> Result<FrameActivations> {
    let cfg = &model.config;
    if frame.shape() != (cfg.height, cfg.width, 3) {
        return Err(Error::ShapeMismatch(format!(
            "frame {:?}, model expects {}x{}x3",
            frame.shape(),
            cfg.height,
            cfg.width
        )));
    }
    let mut input = frame.clone();
    input.data_mut().iter_mut().for_each(|v| *v -= 0.5);
    let a1 = relu(&model.backbone[0].forward(&input)?);
    let a2 = relu(&model.backbone[1].forward(&a1)?);
    let a3 = relu(&model.backbone[2].forward(&a2)?);
    let a4 = relu(&model.backbone[3].forward(&a3)?);
    Ok(FrameActivations {
        rpn: model.rpn.forward(&a4)?,
        cls: model.cls.forward(&a4)?,
        reg: model.reg.forward(&a4)?,
        input,
        stages: [a1, a2, a3, a4],
    })
}

/// Gradients arriving at one frame's outputs.
struct FrameGrads {
    rpn: FeatureMap,
    cls: FeatureMap,
    reg: FeatureMap,
    fine: Option<FeatureMap>,
    coarse: Option<FeatureMap>,
}

impl FrameGrads {
    fn zeros(acts: &FrameActivations) -> Self {
        let z = |m: &FeatureMap| FeatureMap::zeros(m.height(), m.width(), m.channels());
        FrameGrads {
            rpn: z(&acts.rpn),
            cls: z(&acts.cls),
            reg: z(&acts.reg),
            fine: None,
            coarse: None,
        }
    }
}

fn accumulate(dst: &mut Conv2d, g: &ConvGrad) {
    for (a, b) in dst.weight.iter_mut().zip(&g.weight) {
        *a += b;
    }
    for (a, b) in dst.bias.iter_mut().zip(&g.bias) {
        *a += b;
    }
}

fn add_into(dst: &mut FeatureMap, src: &FeatureMap) -> Result<()> {
    dst.add_assign(src)
}

fn backward_frame(model: &Model, acts: &FrameActivations, g: FrameGrads, out: &mut Model) -> Result<()> {
    let a4 = acts.coarse();
    let (mut ga4, gw) = model.rpn.backward(a4, &g.rpn)?;
    accumulate(&mut out.rpn, &gw);
    let (gx, gw) = model.cls.backward(a4, &g.cls)?;
    add_into(&mut ga4, &gx)?;
    accumulate(&mut out.cls, &gw);
    let (gx, gw) = model.reg.backward(a4, &g.reg)?;
    add_into(&mut ga4, &gx)?;
    accumulate(&mut out.reg, &gw);
    if let Some(c) = &g.coarse {
        add_into(&mut ga4, c)?;
    }

    let s = &acts.stages;
    let (ga3, gw) = model.backbone[3].backward(&s[2], &relu_backward(&ga4, &s[3]))?;
    accumulate(&mut out.backbone[3], &gw);
    let (mut ga2, gw) = model.backbone[2].backward(&s[1], &relu_backward(&ga3, &s[2]))?;
    accumulate(&mut out.backbone[2], &gw);
    if let Some(f) = &g.fine {
        add_into(&mut ga2, f)?;
    }
    let (ga1, gw) = model.backbone[1].backward(&s[0], &relu_backward(&ga2, &s[1]))?;
    accumulate(&mut out.backbone[1], &gw);
    let (_, gw) = model.backbone[0].backward(&acts.input, &relu_backward(&ga1, &s[0]))?;
    accumulate(&mut out.backbone[0], &gw);
    Ok(())
}

/// Track-head activations of one frame pair.
#[derive(Debug, Clone)]
pub struct TrackActivations {
    pub stack: FeatureMap,
    pub track: FeatureMap,
}

/// Correlates both scales and regresses the `4 k^2` track maps from
/// `[corr_fine, corr_coarse, reg_t, reg_next]`.
pub fn forward_track(model: &Model, t: &FrameActivations, next: &FrameActivations) -> Result<TrackActivations> {
    let cfg = &model.config;
    let fine = correlate(t.fine(), next.fine(), &cfg.fine_correlation())?;
    let coarse = correlate(t.coarse(), next.coarse(), &cfg.coarse_correlation())?;
    let stack = FeatureMap::concat_channels(&[&fine.map, &coarse.map, &t.reg, &next.reg])?;
    Ok(TrackActivations {
        track: model.track.forward(&stack)?,
        stack,
    })
}

/// Everything needed to evaluate the training loss on one frame pair.
/// Nothing in here depends on the parameters.
#[derive(Debug, Clone)]
pub struct PairSample {
    pub frames: [FeatureMap; 2],
    pub batch: RoiBatch,
    pub anchors: [Vec<AnchorTarget>; 2],
    /// Skip the track head and its loss.
    pub detection_only: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, serde::Serialize, serde::Deserialize)]
pub struct SampleLoss {
    pub det: LossReport,
    /// Anchor objectness + box loss, averaged over the two frames.
    pub rpn: f64,
    pub total: f64,
}

pub(crate) struct Evaluated {
    pub loss: SampleLoss,
    pub grad: Option<Model>,
    pub regime: u64,
}

fn slot_index(s: FrameSlot) -> usize {
    match s {
        FrameSlot::Current => 0,
        FrameSlot::Next => 1,
    }
}

fn to_delta(v: &[f64]) -> TrackDelta {
    TrackDelta::new(v[0], v[1], v[2], v[3])
}

/// Loss of one sample and, with `want_grad`, its gradient in model layout.
pub(crate) fn evaluate_sample(model: &Model, sample: &PairSample, want_grad: bool) -> Result<Evaluated> {
    let cfg = &model.config;
    let grid = cfg.grid();
    let scale = cfg.spatial_scale();
    let acts = [forward_frame(model, &sample.frames[0])?, forward_frame(model, &sample.frames[1])?];
    let batch = &sample.batch;
    let use_track = !sample.detection_only;
    let track = if use_track {
        Some(forward_track(model, &acts[0], &acts[1])?)
    } else {
        None
    };

    let mut hasher = DefaultHasher::new();
    acts[0].relu_signature(&mut hasher);
    acts[1].relu_signature(&mut hasher);

    let mut pooled_cls: Vec<PooledRoi> = Vec::with_capacity(batch.n());
    let mut pooled_reg: Vec<PooledRoi> = Vec::with_capacity(batch.n());
    let mut preds = Predictions {
        probs: Vec::with_capacity(batch.n()),
        box_deltas: Vec::with_capacity(batch.n()),
        track_deltas: Vec::new(),
    };
    for roi in &batch.rois {
        let a = &acts[slot_index(roi.slot)];
        let pc = psroi_pool(&a.cls, &roi.bbox, &grid, PoolMode::Score, scale)?;
        let pr = psroi_pool(&a.reg, &roi.bbox, &grid, PoolMode::Regression, scale)?;
        preds.probs.push(softmax(&pc.values));
        preds.box_deltas.push(to_delta(&pr.values));
        pooled_cls.push(pc);
        pooled_reg.push(pr);
    }
    let empty_batch;
    let batch = if use_track {
        batch
    } else {
        empty_batch = RoiBatch {
            track_targets: Vec::new(),
            ..batch.clone()
        };
        &empty_batch
    };
    let mut pooled_track = Vec::with_capacity(batch.n_tra());
    if let Some(tr) = &track {
        for t in &batch.track_targets {
            let p = psroi_pool(&tr.track, &batch.rois[t.roi].bbox, &grid, PoolMode::Regression, scale)?;
            preds.track_deltas.push(to_delta(&p.values));
            pooled_track.push(p);
        }
    }

    let det = loss(batch, &preds, DEFAULT_LAMBDA)?;
    for (r, t) in batch.box_targets.iter().enumerate() {
        if let (Some(t), true) = (t, batch.labels[r] > 0) {
            for (p, q) in preds.box_deltas[r].to_array().iter().zip(t.to_array()) {
                ((p - q).abs() < 1.0).hash(&mut hasher);
            }
        }
    }
    for (t, p) in batch.track_targets.iter().zip(&preds.track_deltas) {
        for (p, q) in p.to_array().iter().zip(t.target.to_array()) {
            ((p - q).abs() < 1.0).hash(&mut hasher);
        }
    }

    let mut grads = want_grad.then(|| [FrameGrads::zeros(&acts[0]), FrameGrads::zeros(&acts[1])]);
    let mut rpn = 0.0;
    for f in 0..2 {
        let (l, sig) = rpn_loss(cfg, &acts[f].rpn, &sample.anchors[f], grads.as_mut().map(|g| &mut g[f].rpn));
        sig.hash(&mut hasher);
        rpn += 0.5 * l;
    }
    if let Some(g) = grads.as_mut() {
        for gf in g.iter_mut() {
            gf.rpn.data_mut().iter_mut().for_each(|v| *v *= 0.5);
        }
    }
    let sample_loss = SampleLoss {
        det,
        rpn,
        total: det.total + rpn,
    };
    if !sample_loss.total.is_finite() {
        return Err(Error::NonFinite(format!("sample loss {sample_loss:?}")));
    }

    let Some(mut fg) = grads else {
        return Ok(Evaluated {
            loss: sample_loss,
            grad: None,
            regime: hasher.finish(),
        });
    };
    let pg = loss_backward(batch, &preds, DEFAULT_LAMBDA)?;
    for (r, roi) in batch.rois.iter().enumerate() {
        let s = slot_index(roi.slot);
        let gl = softmax_backward(&preds.probs[r], &pg.probs[r]);
        psroi_pool_backward(&gl, &pooled_cls[r], &mut fg[s].cls)?;
        if pg.box_deltas[r] != [0.0; 4] {
            psroi_pool_backward(&pg.box_deltas[r], &pooled_reg[r], &mut fg[s].reg)?;
        }
    }
    let mut out = Model::zeros(cfg)?;
    if let Some(tr) = &track {
        let mut g_track = FeatureMap::zeros(tr.track.height(), tr.track.width(), tr.track.channels());
        for (i, p) in pooled_track.iter().enumerate() {
            psroi_pool_backward(&pg.track_deltas[i], p, &mut g_track)?;
        }
        let (g_stack, gw) = model.track.backward(&tr.stack, &g_track)?;
        accumulate(&mut out.track, &gw);
        let fine_p = cfg.fine_correlation();
        let coarse_p = cfg.coarse_correlation();
        let r = grid.regression_channels();
        let parts = g_stack.split_channels(&[fine_p.offsets(), coarse_p.offsets(), r, r])?;
        let (gf0, gf1) = correlate_backward(&parts[0], acts[0].fine(), acts[1].fine(), &fine_p)?;
        let (gc0, gc1) = correlate_backward(&parts[1], acts[0].coarse(), acts[1].coarse(), &coarse_p)?;
        fg[0].reg.add_assign(&parts[2])?;
        fg[1].reg.add_assign(&parts[3])?;
        fg[0].fine = Some(gf0);
        fg[1].fine = Some(gf1);
        fg[0].coarse = Some(gc0);
        fg[1].coarse = Some(gc1);
    }
    let [g0, g1] = fg;
    backward_frame(model, &acts[0], g0, &mut out)?;
    backward_frame(model, &acts[1], g1, &mut out)?;
    Ok(Evaluated {
        loss: sample_loss,
        grad: Some(out),
        regime: hasher.finish(),
    })
}

/// Per-RoI class probabilities and box deltas on one frame.
pub fn classify_rois(model: &Model, acts: &FrameActivations, rois: &[BBox]) -> Result<Vec<(Vec<f64>, BoxDelta)>> {
    let grid = model.config.grid();
    let scale = model.config.spatial_scale();
    rois.iter()
        .map(|r| {
            let pc = psroi_pool(&acts.cls, r, &grid, PoolMode::Score, scale)?;
            let pr = psroi_pool(&acts.reg, r, &grid, PoolMode::Regression, scale)?;
            Ok((softmax(&pc.values), to_delta(&pr.values)))
        })
        .collect()
}

/// Track deltas pooled from the pair's track maps at frame-`t` boxes.
pub fn track_rois(model: &Model, track: &TrackActivations, rois: &[BBox]) -> Result<Vec<TrackDelta>> {
    let grid = model.config.grid();
    let scale = model.config.spatial_scale();
    rois.iter()
        .map(|r| Ok(to_delta(&psroi_pool(&track.track, r, &grid, PoolMode::Regression, scale)?.values)))
        .collect()
}
