use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::records::{read_json, write_json};
use crate::tensorops::{read_dtt, write_dtt, Conv2d, CorrelationParams, FeatureMap, RoiGrid};

/// Architecture hyper-parameters. Everything else is derived from these.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub height: usize,
    pub width: usize,
    /// Foreground classes `C`.
    pub classes: usize,
    /// Side of the position-sensitive grid.
    pub k: usize,
    /// Output channels of the four backbone stages.
    pub channels: [usize; 4],
    /// Requested correlation displacement; capped per scale to fit the maps.
    pub max_displacement: usize,
    /// Stride of the fine-scale correlation.
    pub corr_stride: usize,
    /// Anchor sides in pixels, one aspect ratio.
    pub anchor_sides: Vec<f64>,
    /// Proposals kept per frame after NMS.
    pub proposals: usize,
    pub proposal_nms: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            height: 48,
            width: 48,
            classes: 3,
            k: 3,
            channels: [8, 16, 16, 24],
            max_displacement: 8,
            corr_stride: 2,
            anchor_sides: vec![8.0, 12.0, 16.0],
            proposals: 64,
            proposal_nms: 0.7,
        }
    }
}

fn half(n: usize) -> usize {
    n.div_ceil(2)
}

impl ModelConfig {
    pub fn grid(&self) -> RoiGrid {
        RoiGrid {
            k: self.k,
            class_count: self.classes,
        }
    }

    /// `(height, width)` of the stride-2 feature map.
    pub fn fine_size(&self) -> (usize, usize) {
        (half(self.height), half(self.width))
    }

    /// `(height, width)` of the stride-4 map every head runs on.
    pub fn coarse_size(&self) -> (usize, usize) {
        let (h, w) = self.fine_size();
        (half(h), half(w))
    }

    /// Pixels to head cells.
    pub fn spatial_scale(&self) -> f64 {
        self.coarse_size().0 as f64 / self.height as f64
    }

    fn capped(&self, (h, w): (usize, usize)) -> usize {
        self.max_displacement.min((h.min(w) - 1) / 2).max(1)
    }

    pub fn fine_correlation(&self) -> CorrelationParams {
        CorrelationParams::new(self.capped(self.fine_size()), self.corr_stride)
    }

    pub fn coarse_correlation(&self) -> CorrelationParams {
        CorrelationParams::new(self.capped(self.coarse_size()), 1)
    }

    pub fn anchors_per_cell(&self) -> usize {
        self.anchor_sides.len()
    }

    /// Channels stacked into the track head: both correlations and both box-regression maps.
    pub fn track_inputs(&self) -> usize {
        self.fine_correlation().offsets() + self.coarse_correlation().offsets() + 2 * self.grid().regression_channels()
    }

    pub fn validate(&self) -> Result<()> {
        if self.height < 16 || self.width < 16 {
            return Err(Error::InvalidConfig(format!("input {}x{} is too small", self.height, self.width)));
        }
        if self.classes == 0 || self.k == 0 || self.channels.contains(&0) {
            return Err(Error::InvalidConfig("classes, k and channel widths must be >= 1".into()));
        }
        if self.max_displacement == 0 || self.corr_stride == 0 {
            return Err(Error::InvalidConfig("max_displacement and corr_stride must be >= 1".into()));
        }
        let fine = self.fine_size();
        if fine.0.div_ceil(self.corr_stride) != self.coarse_size().0
            || fine.1.div_ceil(self.corr_stride) != self.coarse_size().1
        {
            return Err(Error::InvalidConfig(format!(
                "fine correlation stride {} does not land on the head resolution",
                self.corr_stride
            )));
        }
        if self.anchor_sides.is_empty() || self.anchor_sides.iter().any(|s| s.is_nan() || *s <= 0.0) {
            return Err(Error::InvalidConfig("anchor sides must be positive".into()));
        }
        if self.proposals == 0 {
            return Err(Error::InvalidConfig("proposals must be >= 1".into()));
        }
        Ok(())
    }
}

/// Backbone of four conv+relu stages (strides 1, 2, 1, 2) and the five heads.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub backbone: [Conv2d; 4],
    /// Objectness logit and box delta per anchor.
    pub rpn: Conv2d,
    /// `k^2 (C + 1)` position-sensitive score maps.
    pub cls: Conv2d,
    /// `4 k^2` position-sensitive box-regression maps.
    pub reg: Conv2d,
    /// `4 k^2` track-regression maps over the stacked correlation features.
    pub track: Conv2d,
}

pub const TENSOR_NAMES: [&str; 16] = [
    "conv1.weight",
    "conv1.bias",
    "conv2.weight",
    "conv2.bias",
    "conv3.weight",
    "conv3.bias",
    "conv4.weight",
    "conv4.bias",
    "rpn.weight",
    "rpn.bias",
    "cls.weight",
    "cls.bias",
    "reg.weight",
    "reg.bias",
    "track.weight",
    "track.bias",
];

impl Model {
    /// All-zero parameters; also the layout of a gradient.
    pub fn zeros(config: &ModelConfig) -> Result<Model> {
        config.validate()?;
        let c = config.channels;
        let grid = config.grid();
        Ok(Model {
            config: config.clone(),
            backbone: [
                Conv2d::zeros(3, c[0], 3, 1, 1),
                Conv2d::zeros(c[0], c[1], 3, 2, 1),
                Conv2d::zeros(c[1], c[2], 3, 1, 1),
                Conv2d::zeros(c[2], c[3], 3, 2, 1),
            ],
            rpn: Conv2d::zeros(c[3], 5 * config.anchors_per_cell(), 1, 1, 0),
            cls: Conv2d::zeros(c[3], grid.score_channels(), 1, 1, 0),
            reg: Conv2d::zeros(c[3], grid.regression_channels(), 1, 1, 0),
            track: Conv2d::zeros(config.track_inputs(), grid.regression_channels(), 1, 1, 0),
        })
    }

    /// He-normal backbone, small-normal heads, zero biases.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Model> {
        let mut m = Model::zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for conv in m.backbone.iter_mut() {
            let fan_in = (conv.kernel * conv.kernel * conv.in_channels) as f64;
            let n = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
            conv.weight.iter_mut().for_each(|w| *w = n.sample(&mut rng));
        }
        for conv in [&mut m.rpn, &mut m.cls, &mut m.reg, &mut m.track] {
            let n = Normal::new(0.0, 0.01).expect("positive std");
            conv.weight.iter_mut().for_each(|w| *w = n.sample(&mut rng));
        }
        Ok(m)
    }

    fn convs(&self) -> [&Conv2d; 8] {
        let b = &self.backbone;
        [&b[0], &b[1], &b[2], &b[3], &self.rpn, &self.cls, &self.reg, &self.track]
    }

    fn convs_mut(&mut self) -> [&mut Conv2d; 8] {
        let [b0, b1, b2, b3] = &mut self.backbone;
        [b0, b1, b2, b3, &mut self.rpn, &mut self.cls, &mut self.reg, &mut self.track]
    }

    /// Parameter tensors in [`TENSOR_NAMES`] order.
    pub fn tensors(&self) -> Vec<&Vec<f64>> {
        self.convs().into_iter().flat_map(|c| [&c.weight, &c.bias]).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Vec<f64>> {
        self.convs_mut()
            .into_iter()
            .flat_map(|c| [&mut c.weight, &mut c.bias])
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.tensors().into_iter().flatten().copied().collect()
    }

    pub fn unflatten(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::ShapeMismatch(format!(
                "{} values for {} parameters",
                flat.len(),
                self.param_count()
            )));
        }
        let mut off = 0;
        for t in self.tensors_mut() {
            let n = t.len();
            t.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// `self += alpha * other`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &Model, alpha: f64) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += alpha * y;
            }
        }
    }

    pub fn squared_norm(&self) -> f64 {
        self.tensors().iter().flat_map(|t| t.iter()).map(|v| v * v).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// Directory of one `DTT1` file per tensor plus `manifest.json`.
    pub fn save(&self, dir: &Path, extra: serde_json::Value) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut entries = Vec::new();
        for (conv_idx, conv) in self.convs().into_iter().enumerate() {
            let kk = conv.kernel * conv.kernel;
            let weight = FeatureMap::from_vec(conv.out_channels, kk, conv.in_channels, conv.weight.clone())?;
            let bias = FeatureMap::from_vec(1, 1, conv.out_channels, conv.bias.clone())?;
            for (name, map) in [(TENSOR_NAMES[2 * conv_idx], weight), (TENSOR_NAMES[2 * conv_idx + 1], bias)] {
                let file = format!("{name}.dtt");
                write_dtt(&dir.join(&file), &map)?;
                let (h, w, d) = map.shape();
                entries.push(TensorEntry {
                    name: name.to_string(),
                    file,
                    shape: [h, w, d],
                });
            }
        }
        write_json(
            &dir.join("manifest.json"),
            &CheckpointManifest {
                config: self.config.clone(),
                tensors: entries,
                extra,
            },
        )
    }

    pub fn load(dir: &Path) -> Result<(Model, serde_json::Value)> {
        let manifest_path = dir.join("manifest.json");
        let manifest: CheckpointManifest = read_json(&manifest_path)?;
        let mut model = Model::zeros(&manifest.config)?;
        if manifest.tensors.len() != TENSOR_NAMES.len() {
            return Err(Error::format(&manifest_path, format!("{} tensors listed", manifest.tensors.len())));
        }
        for (entry, (slot, want)) in manifest.tensors.iter().zip(model.tensors_mut().into_iter().zip(TENSOR_NAMES)) {
            if entry.name != want {
                return Err(Error::format(&manifest_path, format!("expected tensor {want}, found {}", entry.name)));
            }
            let path = dir.join(&entry.file);
            let map = read_dtt(&path)?;
            if map.len() != slot.len() || [map.height(), map.width(), map.channels()] != entry.shape {
                return Err(Error::format(&path, format!("shape {:?} does not fit {want}", map.shape())));
            }
            slot.copy_from_slice(map.data());
        }
        Ok((model, manifest.extra))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    file: String,
    shape: [usize; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CheckpointManifest {
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
    #[serde(default)]
    extra: serde_json::Value,
}
