//! Seeded generator of short videos of moving colored shapes with
//! ground-truth boxes and track identities.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::records::{read_json, read_jsonl, write_json, write_jsonl, AnnotationRecord};
use crate::tensorops::{read_dtt, write_dtt, FeatureMap};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Square,
    Disc,
    Triangle,
}

impl ShapeKind {
    pub fn color(self) -> [f64; 3] {
        match self {
            ShapeKind::Square => [0.9, 0.25, 0.2],
            ShapeKind::Disc => [0.2, 0.85, 0.3],
            ShapeKind::Triangle => [0.25, 0.35, 0.95],
        }
    }

    /// Whether the pixel center `(px, py)` lies inside the shape inscribed in `b`.
    fn covers(self, b: &BBox, px: f64, py: f64) -> bool {
        let [x1, y1, x2, y2] = b.corners();
        if px < x1 || px >= x2 || py < y1 || py >= y2 {
            return false;
        }
        match self {
            ShapeKind::Square => true,
            ShapeKind::Disc => {
                let u = (px - b.x) / (0.5 * b.w);
                let v = (py - b.y) / (0.5 * b.h);
                u * u + v * v <= 1.0
            }
            // apex at the top center, base along the bottom edge
            ShapeKind::Triangle => (px - b.x).abs() <= 0.5 * b.w * (py - y1) / b.h,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    /// Shape kind of class `c` is `classes[c - 1]`.
    pub classes: Vec<ShapeKind>,
    pub videos: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    /// Inclusive range of objects per video.
    pub objects: [usize; 2],
    /// Per-axis velocity range in pixels per frame.
    pub velocity: [f64; 2],
    /// Range of the per-frame log size change.
    pub scale_change: [f64; 2],
    /// Range of the initial box side, `sqrt(w * h)`, in pixels.
    pub size: [f64; 2],
    /// Range of the aspect ratio `w / h`.
    pub aspect: [f64; 2],
    /// Bound on the per-frame positional jitter in pixels.
    pub jitter: f64,
    /// Standard deviation of the additive pixel noise.
    pub noise: f64,
    /// Probability that a video contains an unannotated gray rectangle.
    pub occluder_prob: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            classes: vec![ShapeKind::Square, ShapeKind::Disc, ShapeKind::Triangle],
            videos: 20,
            frames: 32,
            height: 48,
            width: 48,
            objects: [1, 2],
            velocity: [-0.8, 0.8],
            scale_change: [-0.01, 0.01],
            size: [9.0, 14.0],
            aspect: [0.8, 1.25],
            jitter: 0.3,
            noise: 0.04,
            occluder_prob: 0.3,
        }
    }
}

fn check_range(name: &str, r: [f64; 2]) -> Result<()> {
    if !(r[0].is_finite() && r[1].is_finite() && r[0] <= r[1]) {
        return Err(Error::InvalidConfig(format!("{name} range {r:?} is not an ordered pair of finite values")));
    }
    Ok(())
}

impl SynthConfig {
    pub fn class_count(&self) -> usize {
        self.classes.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames < 2 {
            return Err(Error::InvalidConfig(format!("frames must be >= 2, got {}", self.frames)));
        }
        if self.height < 32 || self.width < 32 {
            return Err(Error::InvalidConfig(format!(
                "image size must be at least 32x32, got {}x{}",
                self.height, self.width
            )));
        }
        if self.classes.is_empty() {
            return Err(Error::InvalidConfig("at least one shape class is required".into()));
        }
        if self.objects[0] > self.objects[1] {
            return Err(Error::InvalidConfig(format!("objects range {:?} is not ordered", self.objects)));
        }
        for (name, r) in [
            ("velocity", self.velocity),
            ("scale_change", self.scale_change),
            ("size", self.size),
            ("aspect", self.aspect),
        ] {
            check_range(name, r)?;
        }
        if self.size[0] < 2.0 || self.aspect[0] <= 0.0 {
            return Err(Error::InvalidConfig("object size must be >= 2 px and aspect positive".into()));
        }
        // the largest initial box must fit with a 1 px margin
        let a = self.aspect[0].min(1.0 / self.aspect[1]).min(1.0);
        let longest = self.size[1] / a.sqrt();
        if longest + 2.0 >= self.height.min(self.width) as f64 {
            return Err(Error::InvalidConfig(format!(
                "objects up to {longest:.1} px cannot be placed inside a {}x{} frame",
                self.height, self.width
            )));
        }
        if !(self.jitter >= 0.0 && self.noise >= 0.0 && (0.0..=1.0).contains(&self.occluder_prob)) {
            return Err(Error::InvalidConfig("jitter, noise must be >= 0 and occluder_prob in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub bbox: BBox,
    pub class: usize,
    pub track_id: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VideoSample {
    /// `H x W x 3` frames with values in `[0, 1]`.
    pub frames: Vec<FeatureMap>,
    pub annotations: Vec<Vec<Annotation>>,
    pub seed: u64,
}

impl VideoSample {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

struct Object {
    kind: ShapeKind,
    class: usize,
    track_id: u64,
    // box at the middle frame
    center: [f64; 2],
    side: f64,
    aspect: f64,
    velocity: [f64; 2],
    log_rate: f64,
}

impl Object {
    fn box_at(&self, t: f64, mid: f64, jitter: [f64; 2]) -> BBox {
        let side = self.side * (self.log_rate * (t - mid)).exp();
        BBox::new(
            self.center[0] + self.velocity[0] * (t - mid) + jitter[0],
            self.center[1] + self.velocity[1] * (t - mid) + jitter[1],
            side * self.aspect.sqrt(),
            side / self.aspect.sqrt(),
        )
    }
}

fn uniform(rng: &mut ChaCha8Rng, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.random_range(r[0]..r[1])
    }
}

fn inside(b: &BBox, width: f64, height: f64) -> bool {
    let [x1, y1, x2, y2] = b.corners();
    x1 >= 1.0 && y1 >= 1.0 && x2 <= width - 1.0 && y2 <= height - 1.0
}

fn paint<F: Fn(f64, f64) -> bool>(frame: &mut FeatureMap, b: &BBox, color: [f64; 3], covers: F) {
    let [x1, y1, x2, y2] = b.corners();
    let (h, w) = (frame.height() as isize, frame.width() as isize);
    let rows = (y1.floor() as isize).max(0)..(y2.ceil() as isize).min(h);
    for i in rows {
        for j in (x1.floor() as isize).max(0)..(x2.ceil() as isize).min(w) {
            if covers(j as f64 + 0.5, i as f64 + 0.5) {
                frame.pixel_mut(i as usize, j as usize).copy_from_slice(&color);
            }
        }
    }
}

/// Generates one video. Objects whose box leaves the frame (less than one
/// pixel of margin) are neither drawn nor annotated in that frame.
pub fn generate(cfg: &SynthConfig, seed: u64) -> Result<VideoSample> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (wf, hf) = (cfg.width as f64, cfg.height as f64);
    let mid = (cfg.frames - 1) as f64 / 2.0;

    let count = rng.random_range(cfg.objects[0]..=cfg.objects[1]);
    let objects: Vec<Object> = (0..count)
        .map(|k| {
            let class = rng.random_range(0..cfg.classes.len());
            let side = uniform(&mut rng, cfg.size);
            let aspect = uniform(&mut rng, cfg.aspect);
            let (bw, bh) = (side * aspect.sqrt(), side / aspect.sqrt());
            // room is guaranteed by validate()
            let cx = rng.random_range(1.0 + bw / 2.0..wf - 1.0 - bw / 2.0);
            let cy = rng.random_range(1.0 + bh / 2.0..hf - 1.0 - bh / 2.0);
            Object {
                kind: cfg.classes[class],
                class: class + 1,
                track_id: k as u64 + 1,
                center: [cx, cy],
                side,
                aspect,
                velocity: [uniform(&mut rng, cfg.velocity), uniform(&mut rng, cfg.velocity)],
                log_rate: uniform(&mut rng, cfg.scale_change),
            }
        })
        .collect();

    let occluder = (rng.random::<f64>() < cfg.occluder_prob).then(|| {
        let w = rng.random_range(5.0..10.0);
        let h = rng.random_range(5.0..10.0);
        let start = [rng.random_range(w..wf - w), rng.random_range(h..hf - h)];
        let v = [rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)];
        (BBox::new(start[0], start[1], w, h), v)
    });

    let noise = (cfg.noise > 0.0).then(|| Normal::new(0.0, cfg.noise).expect("positive std"));
    let mut frames = Vec::with_capacity(cfg.frames);
    let mut annotations = Vec::with_capacity(cfg.frames);
    for t in 0..cfg.frames {
        let mut frame = FeatureMap::filled(cfg.height, cfg.width, 3, 0.1);
        let mut ann = Vec::new();
        for o in &objects {
            let jitter = if cfg.jitter > 0.0 {
                [rng.random_range(-cfg.jitter..=cfg.jitter), rng.random_range(-cfg.jitter..=cfg.jitter)]
            } else {
                [0.0, 0.0]
            };
            let b = o.box_at(t as f64, mid, jitter);
            if !inside(&b, wf, hf) {
                continue;
            }
            paint(&mut frame, &b, o.kind.color(), |px, py| o.kind.covers(&b, px, py));
            ann.push(Annotation {
                bbox: b,
                class: o.class,
                track_id: o.track_id,
            });
        }
        if let Some((b, v)) = occluder {
            let b = b.translated(v[0] * t as f64, v[1] * t as f64);
            paint(&mut frame, &b, [0.55, 0.55, 0.55], |_, _| true);
        }
        if let Some(n) = &noise {
            for v in frame.data_mut() {
                *v = (*v + n.sample(&mut rng)).clamp(0.0, 1.0);
            }
        }
        frames.push(frame);
        annotations.push(ann);
    }
    Ok(VideoSample {
        frames,
        annotations,
        seed,
    })
}

/// Seed of video `index` in a dataset generated from `seed`.
pub fn video_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (index as u64).wrapping_add(1).wrapping_mul(0xD1B5_4A32_D192_ED03)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config: SynthConfig,
    pub seed: u64,
    pub videos: Vec<VideoSample>,
}

pub fn generate_dataset(cfg: &SynthConfig, seed: u64) -> Result<Dataset> {
    cfg.validate()?;
    let videos = (0..cfg.videos)
        .into_par_iter()
        .map(|i| generate(cfg, video_seed(seed, i)))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        config: cfg.clone(),
        seed,
        videos,
    })
}

pub fn video_dir_name(index: usize) -> String {
    format!("video_{index:04}")
}

fn frame_file_name(t: usize) -> String {
    format!("frame_{t:04}.dtt")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct VideoMeta {
    seed: u64,
    frames: usize,
    height: usize,
    width: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoEntry {
    pub name: String,
    pub seed: u64,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub config: SynthConfig,
    pub videos: Vec<VideoEntry>,
}

/// Writes `dir/frame_XXXX.dtt`, `dir/annotations.jsonl` and `dir/video.json`.
pub fn save_video(sample: &VideoSample, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (t, f) in sample.frames.iter().enumerate() {
        write_dtt(&dir.join(frame_file_name(t)), f)?;
    }
    let records: Vec<AnnotationRecord> = sample
        .annotations
        .iter()
        .enumerate()
        .flat_map(|(t, anns)| {
            anns.iter().map(move |a| AnnotationRecord {
                frame: t,
                class: a.class,
                track_id: a.track_id,
                bbox: a.bbox,
            })
        })
        .collect();
    write_jsonl(&dir.join("annotations.jsonl"), &records)?;
    let (height, width) = sample.frames.first().map_or((0, 0), |f| (f.height(), f.width()));
    write_json(
        &dir.join("video.json"),
        &VideoMeta {
            seed: sample.seed,
            frames: sample.frames.len(),
            height,
            width,
        },
    )
}

pub fn load_annotations(dir: &Path, frames: usize) -> Result<Vec<Vec<Annotation>>> {
    let path = dir.join("annotations.jsonl");
    let mut annotations = vec![Vec::new(); frames];
    for r in read_jsonl::<AnnotationRecord>(&path)? {
        let slot = annotations
            .get_mut(r.frame)
            .ok_or_else(|| Error::format(&path, format!("annotation for frame {} of a {frames}-frame video", r.frame)))?;
        slot.push(Annotation {
            bbox: r.bbox.validated()?,
            class: r.class,
            track_id: r.track_id,
        });
    }
    Ok(annotations)
}

pub fn load_video(dir: &Path) -> Result<VideoSample> {
    let meta: VideoMeta = read_json(&dir.join("video.json"))?;
    let frames = (0..meta.frames)
        .map(|t| {
            let path = dir.join(frame_file_name(t));
            let f = read_dtt(&path)?;
            if f.shape() != (meta.height, meta.width, 3) {
                return Err(Error::format(
                    &path,
                    format!("frame shape {:?} differs from {}x{}x3", f.shape(), meta.height, meta.width),
                ));
            }
            Ok(f)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(VideoSample {
        annotations: load_annotations(dir, meta.frames)?,
        frames,
        seed: meta.seed,
    })
}

pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<DatasetManifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    ds.videos
        .par_iter()
        .enumerate()
        .map(|(i, v)| save_video(v, &dir.join(video_dir_name(i))))
        .collect::<Result<()>>()?;
    let manifest = DatasetManifest {
        seed: ds.seed,
        config: ds.config.clone(),
        videos: ds
            .videos
            .iter()
            .enumerate()
            .map(|(i, v)| VideoEntry {
                name: video_dir_name(i),
                seed: v.seed,
                frames: v.len(),
                height: ds.config.height,
                width: ds.config.width,
            })
            .collect(),
    };
    write_json(&dir.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

pub fn load_manifest(dir: &Path) -> Result<DatasetManifest> {
    read_json(&dir.join("manifest.json"))
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = load_manifest(dir)?;
    let videos = manifest
        .videos
        .par_iter()
        .map(|e| load_video(&dir.join(&e.name)))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        config: manifest.config,
        seed: manifest.seed,
        videos,
    })
}
