//! A tiny fully-convolutional detect-and-track network with hand-written
//! backpropagation.
//!
//! Four conv+relu stages produce a stride-2 (`fine`) and a stride-4
//! (`coarse`) feature map. The coarse map feeds an anchor objectness head
//! and the position-sensitive score and box-regression heads. For a frame
//! pair, both scales are correlated and stacked with the two box-regression
//! maps; a 1x1 convolution over the stack gives the track-regression maps,
//! pooled at frame-`t` boxes to predict their motion to `t + τ`.

mod forward;
mod infer;
mod model;
mod rpn;
mod train;

pub use forward::{
    classify_rois, forward_frame, forward_track, track_rois, FrameActivations, PairSample, SampleLoss,
    TrackActivations,
};
pub use infer::{infer_video, propose, VideoInference};
pub use model::{Model, ModelConfig, TENSOR_NAMES};
pub use rpn::{anchors, proposals_from_map, sample_anchor_targets, AnchorSampling, AnchorTarget, Proposal};
pub use train::{
    batch_gradient, build_sample, draw_sample, evaluate_loss, ground_truth, held_out_samples, train, train_from,
    IterationLog, TrainConfig, TrainOutcome,
};

use crate::error::Result;
use crate::tensorops::{grad_check_coords, Differentiable, GradCheckReport};

/// Total training loss of one fixed sample as a function of the flattened parameters.
pub struct NetworkLoss<'a> {
    pub template: &'a Model,
    pub sample: &'a PairSample,
}

impl NetworkLoss<'_> {
    fn with_params(&self, x: &[f64]) -> Result<Model> {
        let mut m = self.template.clone();
        m.unflatten(x)?;
        Ok(m)
    }
}

impl Differentiable for NetworkLoss<'_> {
    fn forward(&self, x: &[f64]) -> Result<f64> {
        Ok(forward::evaluate_sample(&self.with_params(x)?, self.sample, false)?.loss.total)
    }

    fn backward(&self, x: &[f64]) -> Result<Vec<f64>> {
        let e = forward::evaluate_sample(&self.with_params(x)?, self.sample, true)?;
        Ok(e.grad.expect("gradient requested").flatten())
    }

    fn regime(&self, x: &[f64]) -> Option<u64> {
        forward::evaluate_sample(&self.with_params(x).ok()?, self.sample, false)
            .ok()
            .map(|e| e.regime)
    }
}

/// Finite-difference check of `per_tensor` evenly spaced coordinates of every
/// parameter tensor. Returns one report per tensor, in [`TENSOR_NAMES`] order.
pub fn network_grad_check(
    model: &Model,
    sample: &PairSample,
    eps: f64,
    per_tensor: usize,
) -> Result<Vec<(&'static str, GradCheckReport)>> {
    let f = NetworkLoss { template: model, sample };
    let x = model.flatten();
    let mut offset = 0;
    let mut out = Vec::new();
    for (name, t) in TENSOR_NAMES.iter().zip(model.tensors()) {
        let n = t.len();
        let step = (n / per_tensor.max(1)).max(1);
        let coords: Vec<usize> = (0..n).step_by(step).take(per_tensor).map(|i| offset + i).collect();
        out.push((*name, grad_check_coords(&f, &x, eps, &coords)?));
        offset += n;
    }
    Ok(out)
}
