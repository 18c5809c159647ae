//! Finite-difference checks of every differentiable piece, from single
//! kernels up to the whole toy network.
//!
//! Each kernel is wrapped as a scalar function `Σ w ⊙ op(x)` with fixed random
//! weights `w`, so a single backward pass exercises every output.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::geometry::{BBox, TrackDelta};
use crate::objective::{assign, loss, loss_backward, FrameSlot, GroundTruth, Predictions, Roi, RoiBatch};
use crate::synthvid::{generate, SynthConfig};
use crate::tensorops::{
    correlate, correlate_backward, grad_check, psroi_pool, psroi_pool_backward, smooth_l1, smooth_l1_grad,
    softmax, softmax_backward, softmax_cross_entropy, Conv2d, CorrelationParams, Differentiable, FeatureMap,
    GradCheckReport, PoolMode, RoiGrid,
};
use crate::toynet::{build_sample, ground_truth, network_grad_check, Model, ModelConfig, PairSample, TrainConfig};

pub const EPSILON: f64 = 1e-3;
pub const TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteEntry {
    pub operation: String,
    pub max_rel_error: f64,
    pub checked: usize,
    pub skipped: usize,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub entries: Vec<SuiteEntry>,
    pub seconds: f64,
}

impl SuiteReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.entries.iter().all(|e| e.max_rel_error < tol && e.checked > 0)
    }

    pub fn max_error(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_error).fold(0.0, f64::max)
    }
}

fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn random_map(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> FeatureMap {
    FeatureMap::from_vec(h, w, c, random_vec(rng, h * w * c)).expect("consistent shape")
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

struct CorrelateFn {
    shape: (usize, usize, usize),
    params: CorrelationParams,
    weights: FeatureMap,
}

impl CorrelateFn {
    fn split(&self, x: &[f64]) -> Result<(FeatureMap, FeatureMap)> {
        let (h, w, c) = self.shape;
        let n = h * w * c;
        Ok((
            FeatureMap::from_vec(h, w, c, x[..n].to_vec())?,
            FeatureMap::from_vec(h, w, c, x[n..].to_vec())?,
        ))
    }
}

impl Differentiable for CorrelateFn {
    fn forward(&self, x: &[f64]) -> Result<f64> {
        let (a, b) = self.split(x)?;
        Ok(dot(correlate(&a, &b, &self.params)?.map.data(), self.weights.data()))
    }

    fn backward(&self, x: &[f64]) -> Result<Vec<f64>> {
        let (a, b) = self.split(x)?;
        let (ga, gb) = correlate_backward(&self.weights, &a, &b, &self.params)?;
        let mut g = ga.into_data();
        g.extend(gb.into_data());
        Ok(g)
    }
}

struct PsroiFn {
    shape: (usize, usize, usize),
    grid: RoiGrid,
    mode: PoolMode,
    rois: Vec<BBox>,
    scale: f64,
    weights: Vec<Vec<f64>>,
}

impl Differentiable for PsroiFn {
    fn forward(&self, x: &[f64]) -> Result<f64> {
        let (h, w, c) = self.shape;
        let maps = FeatureMap::from_vec(h, w, c, x.to_vec())?;
        let mut total = 0.0;
        for (roi, wv) in self.rois.iter().zip(&self.weights) {
            total += dot(&psroi_pool(&maps, roi, &self.grid, self.mode, self.scale)?.values, wv);
        }
        Ok(total)
    }

    fn backward(&self, x: &[f64]) -> Result<Vec<f64>> {
        let (h, w, c) = self.shape;
        let maps = FeatureMap::from_vec(h, w, c, x.to_vec())?;
        let mut grad = FeatureMap::zeros(h, w, c);
        for (roi, wv) in self.rois.iter().zip(&self.weights) {
            let pooled = psroi_pool(&maps, roi, &self.grid, self.mode, self.scale)?;
            psroi_pool_backward(wv, &pooled, &mut grad)?;
        }
        Ok(grad.into_data())
    }
}

struct ConvFn {
    template: Conv2d,
    input_shape: (usize, usize, usize),
    weights: FeatureMap,
}

impl ConvFn {
    fn split(&self, x: &[f64]) -> Result<(FeatureMap, Conv2d)> {
        let (h, w, c) = self.input_shape;
        let n = h * w * c;
        let nw = self.template.weight.len();
        let mut conv = self.template.clone();
        conv.weight.copy_from_slice(&x[n..n + nw]);
        conv.bias.copy_from_slice(&x[n + nw..]);
        Ok((FeatureMap::from_vec(h, w, c, x[..n].to_vec())?, conv))
    }
}

impl Differentiable for ConvFn {
    fn forward(&self, x: &[f64]) -> Result<f64> {
        let (input, conv) = self.split(x)?;
        Ok(dot(conv.forward(&input)?.data(), self.weights.data()))
    }

    fn backward(&self, x: &[f64]) -> Result<Vec<f64>> {
        let (input, conv) = self.split(x)?;
        let (gx, gp) = conv.backward(&input, &self.weights)?;
        let mut g = gx.into_data();
        g.extend(gp.weight);
        g.extend(gp.bias);
        Ok(g)
    }
}

struct CrossEntropyFn {
    labels: Vec<usize>,
    classes: usize,
}

impl Differentiable for CrossEntropyFn {
    fn forward(&self, x: &[f64]) -> Result<f64> {
        Ok(x.chunks(self.classes)
            .zip(&self.labels)
            .map(|(z, &c)| softmax_cross_entropy(z, c).0)
            .sum())
    }

    fn backward(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(x.chunks(self.classes)
            .zip(&self.labels)
            .flat_map(|(z, &c)| softmax_cross_entropy(z, c).1)
            .collect())
    }
}

struct SmoothL1Fn {
    weights: Vec<f64>,
}

impl Differentiable for SmoothL1Fn {
    fn forward(&self, x: &[f64]) -> Result<f64> {
        Ok(x.iter().zip(&self.weights).map(|(v, w)| w * smooth_l1(*v)).sum())
    }

    fn backward(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(x.iter().zip(&self.weights).map(|(v, w)| w * smooth_l1_grad(*v)).collect())
    }

    fn regime(&self, x: &[f64]) -> Option<u64> {
        Some(x.iter().fold(0u64, |h, v| h.wrapping_mul(3).wrapping_add((v.abs() < 1.0) as u64)))
    }
}

/// The joint loss as a function of class logits, box deltas and track deltas.
struct JointLossFn {
    batch: RoiBatch,
    classes: usize,
}

impl JointLossFn {
    fn predictions(&self, x: &[f64]) -> Predictions {
        let (n, c) = (self.batch.n(), self.classes);
        let deltas = |s: &[f64]| -> Vec<TrackDelta> {
            s.chunks(4).map(|d| TrackDelta::new(d[0], d[1], d[2], d[3])).collect()
        };
        Predictions {
            probs: x[..n * c].chunks(c).map(softmax).collect(),
            box_deltas: deltas(&x[n * c..n * c + 4 * n]),
            track_deltas: deltas(&x[n * c + 4 * n..]),
        }
    }
}

impl Differentiable for JointLossFn {
    fn forward(&self, x: &[f64]) -> Result<f64> {
        Ok(loss(&self.batch, &self.predictions(x), 1.0)?.total)
    }

    fn backward(&self, x: &[f64]) -> Result<Vec<f64>> {
        let p = self.predictions(x);
        let g = loss_backward(&self.batch, &p, 1.0)?;
        let mut out: Vec<f64> = p
            .probs
            .iter()
            .zip(&g.probs)
            .flat_map(|(pr, gp)| softmax_backward(pr, gp))
            .collect();
        out.extend(g.box_deltas.iter().flatten());
        out.extend(g.track_deltas.iter().flatten());
        Ok(out)
    }

    fn regime(&self, x: &[f64]) -> Option<u64> {
        let p = self.predictions(x);
        let mut h = 0u64;
        let mut push = |a: [f64; 4], b: [f64; 4]| {
            for k in 0..4 {
                h = h.wrapping_mul(3).wrapping_add(((a[k] - b[k]).abs() < 1.0) as u64);
            }
        };
        for (r, t) in self.batch.box_targets.iter().enumerate() {
            if let Some(t) = t {
                push(p.box_deltas[r].to_array(), t.to_array());
            }
        }
        for (t, d) in self.batch.track_targets.iter().zip(&p.track_deltas) {
            push(d.to_array(), t.target.to_array());
        }
        Some(h)
    }
}

/// The small fixed instance used for the whole-network check: a 32x32 frame
/// pair with one object and two RoIs per frame.
pub fn network_instance(seed: u64) -> Result<(Model, PairSample)> {
    let cfg = ModelConfig {
        height: 32,
        width: 32,
        channels: [4, 6, 6, 8],
        k: 2,
        ..Default::default()
    };
    let synth = SynthConfig {
        height: 32,
        width: 32,
        frames: 3,
        objects: [1, 1],
        size: [8.0, 10.0],
        ..Default::default()
    };
    let video = generate(&synth, 21)?;
    let tc = TrainConfig {
        model: cfg.clone(),
        ..Default::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sample = build_sample(&video, 0, 1, &tc, &mut rng)?;
    let gt = [ground_truth(&video.annotations[0]), ground_truth(&video.annotations[1])];
    let rois: Vec<Roi> = [FrameSlot::Current, FrameSlot::Next]
        .into_iter()
        .zip(&gt)
        .flat_map(|(slot, g)| {
            let b = g[0].bbox;
            [b, b.translated(3.0, -2.0)].map(|bbox| Roi { slot, bbox })
        })
        .collect();
    sample.batch = assign(&rois, [&gt[0], &gt[1]], &Default::default())?;
    Ok((Model::init(&cfg, 5)?, sample))
}

fn entry(operation: &str, start: Instant, r: &GradCheckReport) -> SuiteEntry {
    SuiteEntry {
        operation: operation.to_string(),
        max_rel_error: r.max_rel_error,
        checked: r.checked,
        skipped: r.skipped,
        seconds: start.elapsed().as_secs_f64(),
    }
}

fn joint_loss_instance(rng: &mut ChaCha8Rng) -> Result<(JointLossFn, Vec<f64>)> {
    let classes = 4;
    let gt0 = vec![
        GroundTruth { bbox: BBox::new(12.0, 14.0, 10.0, 8.0), class: 1, track_id: 0 },
        GroundTruth { bbox: BBox::new(30.0, 28.0, 9.0, 12.0), class: 3, track_id: 1 },
    ];
    let gt1: Vec<GroundTruth> = gt0
        .iter()
        .map(|g| GroundTruth { bbox: g.bbox.translated(1.5, -1.0), ..*g })
        .collect();
    let mut rois = Vec::new();
    for (slot, g) in [(FrameSlot::Current, &gt0), (FrameSlot::Next, &gt1)] {
        for x in g {
            rois.push(Roi { slot, bbox: x.bbox.translated(0.8, -0.6) });
        }
        rois.push(Roi { slot, bbox: BBox::new(40.0, 6.0, 6.0, 6.0) });
    }
    let batch = assign(&rois, [&gt0, &gt1], &Default::default())?;
    let n = batch.n();
    let len = n * classes + 4 * n + 4 * batch.n_tra();
    let x = random_vec(rng, len).iter().map(|v| 0.5 * v).collect();
    Ok((JointLossFn { batch, classes }, x))
}

/// Runs every check at `ε = 1e-3`.
pub fn run_gradient_suite(seed: u64) -> Result<SuiteReport> {
    let total = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::new();

    let t = Instant::now();
    let params = CorrelationParams::new(2, 1);
    let shape = (6, 7, 3);
    let f = CorrelateFn {
        shape,
        params,
        weights: random_map(&mut rng, 6, 7, params.offsets()),
    };
    let x = random_vec(&mut rng, 2 * shape.0 * shape.1 * shape.2);
    entries.push(entry("correlate", t, &grad_check(&f, &x, EPSILON)?));

    let t = Instant::now();
    let params = CorrelationParams::new(2, 2);
    let f = CorrelateFn {
        shape,
        params,
        weights: {
            let (oh, ow) = params.output_size(6, 7);
            random_map(&mut rng, oh, ow, params.offsets())
        },
    };
    let x = random_vec(&mut rng, 2 * shape.0 * shape.1 * shape.2);
    entries.push(entry("correlate_strided", t, &grad_check(&f, &x, EPSILON)?));

    for (name, mode) in [("psroi_pool_score", PoolMode::Score), ("psroi_pool_regression", PoolMode::Regression)] {
        let t = Instant::now();
        let grid = RoiGrid::new(3, 2)?;
        let c = grid.channels(mode);
        let rois = vec![BBox::new(14.0, 12.0, 18.0, 14.0), BBox::new(6.0, 20.0, 9.0, 11.0)];
        let f = PsroiFn {
            shape: (8, 8, c),
            grid,
            mode,
            weights: rois.iter().map(|_| random_vec(&mut rng, grid.groups(mode))).collect(),
            rois,
            scale: 0.25,
        };
        let x = random_vec(&mut rng, 64 * c);
        entries.push(entry(name, t, &grad_check(&f, &x, EPSILON)?));
    }

    let t = Instant::now();
    let mut conv = Conv2d::zeros(3, 4, 3, 2, 1);
    let f = {
        let (oh, ow) = conv.output_size(7, 6);
        conv.weight = random_vec(&mut rng, conv.weight.len());
        ConvFn {
            input_shape: (7, 6, 3),
            weights: random_map(&mut rng, oh, ow, 4),
            template: conv.clone(),
        }
    };
    let mut x = random_vec(&mut rng, 7 * 6 * 3);
    x.extend(random_vec(&mut rng, conv.weight.len() + conv.bias.len()));
    entries.push(entry("conv2d", t, &grad_check(&f, &x, EPSILON)?));

    let t = Instant::now();
    let f = CrossEntropyFn {
        labels: vec![0, 2, 4, 1],
        classes: 5,
    };
    let x: Vec<f64> = random_vec(&mut rng, 20).iter().map(|v| 3.0 * v).collect();
    entries.push(entry("softmax_cross_entropy", t, &grad_check(&f, &x, EPSILON)?));

    let t = Instant::now();
    let x: Vec<f64> = (0..40)
        .map(|_| loop {
            let v: f64 = rng.random_range(-3.0..3.0);
            if (v.abs() - 1.0).abs() > 0.05 {
                break v;
            }
        })
        .collect();
    let f = SmoothL1Fn {
        weights: random_vec(&mut rng, x.len()),
    };
    entries.push(entry("smooth_l1", t, &grad_check(&f, &x, EPSILON)?));

    let t = Instant::now();
    let (f, x) = joint_loss_instance(&mut rng)?;
    entries.push(entry("joint_loss", t, &grad_check(&f, &x, EPSILON)?));

    let t = Instant::now();
    let (model, sample) = network_instance(seed)?;
    let mut merged = GradCheckReport {
        max_rel_error: 0.0,
        worst_coordinate: None,
        checked: 0,
        skipped: 0,
    };
    for (_, r) in network_grad_check(&model, &sample, EPSILON, 6)? {
        merged.max_rel_error = merged.max_rel_error.max(r.max_rel_error);
        merged.checked += r.checked;
        merged.skipped += r.skipped;
    }
    entries.push(entry("network", t, &merged));

    Ok(SuiteReport {
        entries,
        seconds: total.elapsed().as_secs_f64(),
    })
}
