//! File-to-file pipeline stages, one per CLI command.
//!
//! Every stage checks its inputs before doing heavy work, writes its outputs
//! under one directory and finishes by writing `run_manifest.json` there.
//! Output hashes never cover the run manifest itself, so two runs with equal
//! inputs and seeds report equal hashes even though their timings differ.
//!
//! Directory layouts:
//!
//! ```text
//! gen      <out>/manifest.json, <out>/video_XXXX/{frame_XXXX.dtt, annotations.jsonl, video.json}
//! train    <out>/manifest.json, <out>/*.dtt, <out>/curve.jsonl
//! infer    <out>/inference.json, <out>/video_XXXX/{detections.jsonl, tracklets.jsonl}
//! link     <out>/link.json, <out>/video_XXXX/{frame.jsonl, linked.jsonl, tubes.jsonl}
//! eval     <out>/report.json, <out>/pr_class_N.csv
//! plotdata <out>/{loss_curve,stride_sweep,alpha_sweep,pr_frame_class_N,pr_video_class_N}.csv, <out>/summary.json
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::evalmap::{evaluate, pr_curve, EvalConfig, EvalResult, GtBox, ScoredBox};
use crate::gradsuite::{run_gradient_suite, SuiteReport};
use crate::linker::{Detection, LinkConfig, Tracklet};
use crate::pipeline::{benchmark, frame_level, infer_all, link_inference, processed_ground_truth, scored_boxes, weaken, WeakenConfig};
use crate::records::{read_json, read_jsonl, write_json, write_jsonl, DetectionRecord, ScoredRecord, TrackletRecord};
use crate::synthvid::{generate_dataset, load_annotations, load_dataset, load_manifest, save_dataset, SynthConfig};
use crate::toynet::{train, IterationLog, Model, TrainConfig, VideoInference};

pub const RUN_MANIFEST: &str = "run_manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PathHash {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub inputs: Vec<PathHash>,
    pub outputs: Vec<PathHash>,
    /// Wall-clock seconds per phase.
    pub timings: BTreeMap<String, f64>,
}

impl RunManifest {
    fn new(command: &str, config: impl Serialize, seed: Option<u64>) -> Self {
        RunManifest {
            command: command.to_string(),
            config: serde_json::to_value(config).unwrap_or(serde_json::Value::Null),
            seed,
            inputs: Vec::new(),
            outputs: Vec::new(),
            timings: BTreeMap::new(),
        }
    }

    fn input(&mut self, path: &Path) -> Result<()> {
        self.inputs.push(PathHash {
            path: path.to_path_buf(),
            sha256: hash_path(path)?,
        });
        Ok(())
    }

    fn time(&mut self, phase: &str, start: Instant) {
        self.timings.insert(phase.to_string(), start.elapsed().as_secs_f64());
    }

    /// Hashes `out`, records the total time and writes the manifest into `out`.
    fn finish(mut self, out: &Path, start: Instant) -> Result<Self> {
        self.outputs.push(PathHash {
            path: out.to_path_buf(),
            sha256: hash_path(out)?,
        });
        self.time("total", start);
        write_json(&out.join(RUN_MANIFEST), &self)?;
        Ok(self)
    }
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_dir() {
            collect_files(root, &path, out)?;
        } else if path.file_name().is_some_and(|n| n != RUN_MANIFEST) {
            out.push(path.strip_prefix(root).expect("walked below root").to_path_buf());
        }
    }
    Ok(())
}

/// SHA-256 of a file, or of a directory tree: every file except run
/// manifests, visited by relative path, hashed as `path \0 len \0 bytes`.
pub fn hash_path(path: &Path) -> Result<String> {
    let mut h = Sha256::new();
    if path.is_dir() {
        let mut files = Vec::new();
        collect_files(path, path, &mut files)?;
        files.sort();
        for rel in files {
            let bytes = fs::read(path.join(&rel)).map_err(|e| Error::io(path.join(&rel), e))?;
            h.update(rel.to_string_lossy().as_bytes());
            h.update([0]);
            h.update((bytes.len() as u64).to_le_bytes());
            h.update([0]);
            h.update(&bytes);
        }
    } else {
        h.update(fs::read(path).map_err(|e| Error::io(path, e))?);
    }
    Ok(hex::encode(h.finalize()))
}

/// Reads a JSON config, or returns the defaults when `path` is `None`.
pub fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        Some(p) => match read_json(p) {
            Err(Error::Format { reason, .. }) => Err(Error::InvalidConfig(format!("{}: {reason}", p.display()))),
            r => r,
        },
        None => Ok(T::default()),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn require_dir(dir: &Path, file: &str) -> Result<()> {
    let p = dir.join(file);
    if p.is_file() {
        Ok(())
    } else {
        Err(Error::io(
            p,
            std::io::Error::new(std::io::ErrorKind::NotFound, "missing input"),
        ))
    }
}

pub fn gen(cfg: &SynthConfig, seed: u64, out: &Path) -> Result<RunManifest> {
    let start = Instant::now();
    cfg.validate()?;
    let mut m = RunManifest::new("gen", cfg, Some(seed));
    let ds = generate_dataset(cfg, seed)?;
    m.time("generate", start);
    save_dataset(&ds, out)?;
    m.finish(out, start)
}

/// Model dimensions always follow the dataset; the rest comes from `cfg`.
pub fn train_stage(data: &Path, cfg: &TrainConfig, out: &Path) -> Result<RunManifest> {
    let start = Instant::now();
    let manifest = load_manifest(data)?;
    let mut cfg = cfg.clone();
    cfg.model.height = manifest.config.height;
    cfg.model.width = manifest.config.width;
    cfg.model.classes = manifest.config.class_count();
    cfg.validate()?;
    let mut m = RunManifest::new("train", &cfg, Some(cfg.seed));
    m.input(data)?;
    let ds = load_dataset(data)?;
    m.time("load", start);
    let t = Instant::now();
    let outcome = train(&ds, &cfg)?;
    m.time("train", t);
    outcome.model.save(out, serde_json::json!({ "train": cfg }))?;
    write_jsonl(&out.join("curve.jsonl"), &outcome.curve)?;
    m.finish(out, start)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferredVideo {
    pub name: String,
    pub frames: usize,
    pub keyframes: Vec<usize>,
    /// Positions in `keyframes` whose scores were corrupted on purpose.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub weakened: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceIndex {
    pub stride: usize,
    pub classes: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weaken: Option<WeakenConfig>,
    pub videos: Vec<InferredVideo>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkIndex {
    pub inference: InferenceIndex,
    pub link: LinkConfig,
}

fn save_inference(inf: &VideoInference, dir: &Path) -> Result<()> {
    create_dir(dir)?;
    let dets: Vec<DetectionRecord> = inf.detections.iter().flatten().map(DetectionRecord::from).collect();
    let tracks: Vec<TrackletRecord> = inf.tracklets.iter().flatten().map(TrackletRecord::from).collect();
    write_jsonl(&dir.join("detections.jsonl"), &dets)?;
    write_jsonl(&dir.join("tracklets.jsonl"), &tracks)
}

/// Rebuilds per-keyframe detections and tracklets from a video's JSONL files.
pub fn load_inference(dir: &Path, stride: usize, keyframes: &[usize]) -> Result<VideoInference> {
    let pos: BTreeMap<usize, usize> = keyframes.iter().enumerate().map(|(k, &t)| (t, k)).collect();
    let det_path = dir.join("detections.jsonl");
    let mut detections = vec![Vec::new(); keyframes.len()];
    for r in read_jsonl::<DetectionRecord>(&det_path)? {
        let k = *pos
            .get(&r.frame)
            .ok_or_else(|| Error::format(&det_path, format!("detection on unprocessed frame {}", r.frame)))?;
        let d = Detection::from(r);
        d.validate().map_err(|e| Error::format(&det_path, e.to_string()))?;
        detections[k].push(d);
    }
    let tr_path = dir.join("tracklets.jsonl");
    let mut tracklets = vec![Vec::new(); keyframes.len().saturating_sub(1)];
    for r in read_jsonl::<TrackletRecord>(&tr_path)? {
        let k = pos
            .get(&r.frame)
            .copied()
            .filter(|&k| k + 1 < keyframes.len() && r.stride == stride)
            .ok_or_else(|| Error::format(&tr_path, format!("tracklet from frame {} with stride {}", r.frame, r.stride)))?;
        tracklets[k].push(Tracklet::from(r));
    }
    Ok(VideoInference {
        stride,
        keyframes: keyframes.to_vec(),
        detections,
        tracklets,
    })
}

pub fn infer_stage(
    model_dir: &Path,
    data: &Path,
    stride: usize,
    weakening: Option<WeakenConfig>,
    out: &Path,
) -> Result<RunManifest> {
    let start = Instant::now();
    if stride == 0 {
        return Err(Error::InvalidArgument("temporal stride must be >= 1".into()));
    }
    require_dir(model_dir, "manifest.json")?;
    let manifest = load_manifest(data)?;
    if let Some(v) = manifest.videos.iter().find(|v| v.frames < stride + 1) {
        return Err(Error::InvalidArgument(format!(
            "{} has {} frames, too short for stride {stride}",
            v.name, v.frames
        )));
    }
    let mut m = RunManifest::new(
        "infer",
        serde_json::json!({ "stride": stride, "weaken": weakening }),
        weakening.map(|w| w.seed),
    );
    m.input(model_dir)?;
    m.input(data)?;
    let (model, _) = Model::load(model_dir)?;
    if (model.config.height, model.config.width) != (manifest.config.height, manifest.config.width) {
        return Err(Error::InvalidConfig(format!(
            "model expects {}x{} frames, dataset has {}x{}",
            model.config.height, model.config.width, manifest.config.height, manifest.config.width
        )));
    }
    let ds = load_dataset(data)?;
    m.time("load", start);
    let t = Instant::now();
    let mut inferences = infer_all(&model, &ds.videos, stride)?;
    m.time("infer", t);
    let mut weakened = vec![Vec::new(); inferences.len()];
    if let Some(w) = &weakening {
        for (i, inf) in inferences.iter_mut().enumerate() {
            let (weak, hit) = weaken(inf, w, i);
            *inf = weak;
            weakened[i] = hit;
        }
    }
    create_dir(out)?;
    let mut videos = Vec::new();
    for ((entry, inf), hit) in manifest.videos.iter().zip(&inferences).zip(weakened) {
        save_inference(inf, &out.join(&entry.name))?;
        videos.push(InferredVideo {
            name: entry.name.clone(),
            frames: entry.frames,
            keyframes: inf.keyframes.clone(),
            weakened: hit,
        });
    }
    write_json(
        &out.join("inference.json"),
        &InferenceIndex {
            stride,
            classes: model.config.classes,
            weaken: weakening,
            videos,
        },
    )?;
    m.finish(out, start)
}

pub fn link_stage(input: &Path, cfg: &LinkConfig, out: &Path) -> Result<RunManifest> {
    let start = Instant::now();
    if !(cfg.alpha > 0.0 && cfg.alpha <= 1.0) {
        return Err(Error::InvalidArgument(format!("alpha must be in (0, 1], got {}", cfg.alpha)));
    }
    let index: InferenceIndex = read_json(&input.join("inference.json"))?;
    let mut m = RunManifest::new("link", cfg, None);
    m.input(input)?;
    let inferences = index
        .videos
        .par_iter()
        .map(|v| load_inference(&input.join(&v.name), index.stride, &v.keyframes))
        .collect::<Result<Vec<_>>>()?;
    m.time("load", start);
    let t = Instant::now();
    let results = inferences
        .par_iter()
        .map(|inf| {
            let frame = frame_level(&inf.detections, index.classes, cfg);
            link_inference(inf, index.classes, cfg).map(|(linked, tubes)| (frame, linked, tubes))
        })
        .collect::<Result<Vec<_>>>()?;
    m.time("link", t);
    create_dir(out)?;
    for (v, (frame, linked, tubes)) in index.videos.iter().zip(results) {
        let dir = out.join(&v.name);
        create_dir(&dir)?;
        write_jsonl(&dir.join("frame.jsonl"), &frame)?;
        write_jsonl(&dir.join("linked.jsonl"), &linked)?;
        write_jsonl(&dir.join("tubes.jsonl"), &tubes)?;
    }
    write_json(
        &out.join("link.json"),
        &LinkIndex {
            inference: index,
            link: *cfg,
        },
    )?;
    m.finish(out, start)
}

/// Which scored boxes of a link directory to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    /// Linked and rescored boxes.
    #[default]
    Linked,
    /// Per-frame NMS output, no linking.
    Frame,
}

impl Source {
    fn file(self) -> &'static str {
        match self {
            Source::Linked => "linked.jsonl",
            Source::Frame => "frame.jsonl",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub source: Source,
    pub config: EvalConfig,
    pub stride: usize,
    pub result: EvalResult,
}

fn pr_csv(dets: &[ScoredBox], gts: &[GtBox], iou: f64) -> String {
    let curve = pr_curve(dets, gts, iou);
    let mut s = String::from("rank,score,true_positive,precision,recall\n");
    for i in 0..curve.scores.len() {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            i + 1,
            curve.scores[i],
            curve.true_positive[i] as u8,
            curve.precision[i],
            curve.recall[i]
        );
    }
    s
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn class_split<'a, T>(items: &'a [T], class: usize, key: impl Fn(&T) -> usize + 'a) -> impl Iterator<Item = &'a T> + 'a {
    items.iter().filter(move |x| key(x) == class)
}

fn write_pr_curves(out: &Path, prefix: &str, dets: &[ScoredBox], gts: &[GtBox], classes: usize, iou: f64) -> Result<()> {
    for c in 1..=classes {
        let d: Vec<ScoredBox> = class_split(dets, c, |x| x.class).copied().collect();
        let g: Vec<GtBox> = class_split(gts, c, |x| x.class).copied().collect();
        write_text(&out.join(format!("{prefix}_class_{c}.csv")), &pr_csv(&d, &g, iou))?;
    }
    Ok(())
}

fn ground_truth_for(data: &Path, index: &InferenceIndex) -> Result<Vec<GtBox>> {
    let mut gts = Vec::new();
    for (i, v) in index.videos.iter().enumerate() {
        let anns = load_annotations(&data.join(&v.name), v.frames)?;
        for &t in &v.keyframes {
            gts.extend(anns[t].iter().map(|a| GtBox {
                image: (i, t),
                class: a.class,
                bbox: a.bbox,
            }));
        }
    }
    Ok(gts)
}

pub fn eval_stage(data: &Path, input: &Path, source: Source, cfg: &EvalConfig, out: &Path) -> Result<RunManifest> {
    let start = Instant::now();
    let index: LinkIndex = read_json(&input.join("link.json"))?;
    let manifest = load_manifest(data)?;
    for v in &index.inference.videos {
        if !manifest.videos.iter().any(|e| e.name == v.name && e.frames == v.frames) {
            return Err(Error::InvalidArgument(format!("{} is not part of dataset {}", v.name, data.display())));
        }
    }
    let mut m = RunManifest::new("eval", serde_json::json!({ "source": source, "eval": cfg }), None);
    m.input(data)?;
    m.input(input)?;
    let gts = ground_truth_for(data, &index.inference)?;
    let mut dets = Vec::new();
    for (i, v) in index.inference.videos.iter().enumerate() {
        let recs: Vec<ScoredRecord> = read_jsonl(&input.join(&v.name).join(source.file()))?;
        dets.extend(scored_boxes(i, &recs));
    }
    let classes = index.inference.classes;
    let result = evaluate(&dets, &gts, classes, cfg);
    create_dir(out)?;
    write_json(
        &out.join("report.json"),
        &EvalReport {
            source,
            config: *cfg,
            stride: index.inference.stride,
            result,
        },
    )?;
    write_pr_curves(out, "pr", &dets, &gts, classes, cfg.iou_thresh)?;
    m.finish(out, start)
}

/// Runs the suite; writes `gradcheck.json` when `out` is given.
pub fn gradcheck_stage(seed: u64, out: Option<&Path>) -> Result<(SuiteReport, Option<RunManifest>)> {
    let start = Instant::now();
    let report = run_gradient_suite(seed)?;
    let Some(out) = out else { return Ok((report, None)) };
    create_dir(out)?;
    write_json(&out.join("gradcheck.json"), &report)?;
    let m = RunManifest::new("gradcheck", serde_json::Value::Null, Some(seed)).finish(out, start)?;
    Ok((report, Some(m)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlotConfig {
    pub strides: Vec<usize>,
    pub alphas: Vec<f64>,
    pub link: LinkConfig,
    pub eval: EvalConfig,
    pub weaken: Option<WeakenConfig>,
}

impl Default for PlotConfig {
    fn default() -> Self {
        PlotConfig {
            strides: vec![1, 2, 4, 8, 10],
            alphas: (1..=10).map(|i| i as f64 / 10.0).collect(),
            link: LinkConfig::default(),
            eval: EvalConfig::default(),
            weaken: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PlotSummary {
    /// `(stride, frame mAP, video mAP)`.
    pub stride_sweep: Vec<(usize, f64, f64)>,
    /// `(alpha, causal, video mAP)` at stride 1.
    pub alpha_sweep: Vec<(f64, bool, f64)>,
    /// Largest minus smallest non-causal video mAP over the alpha sweep.
    pub alpha_spread: f64,
}

fn apply_weakening(infs: Vec<VideoInference>, w: Option<&WeakenConfig>) -> Vec<VideoInference> {
    match w {
        Some(w) => infs.iter().enumerate().map(|(i, inf)| weaken(inf, w, i).0).collect(),
        None => infs,
    }
}

/// Loss curve, mAP-vs-stride and mAP-vs-alpha sweeps and PR curves as CSV.
pub fn plotdata_stage(model_dir: &Path, data: &Path, cfg: &PlotConfig, out: &Path) -> Result<RunManifest> {
    let start = Instant::now();
    if cfg.strides.is_empty() || cfg.strides.contains(&0) {
        return Err(Error::InvalidConfig("strides must be non-empty and >= 1".into()));
    }
    if cfg.alphas.iter().any(|a| !(*a > 0.0 && *a <= 1.0)) {
        return Err(Error::InvalidConfig("alphas must lie in (0, 1]".into()));
    }
    require_dir(model_dir, "manifest.json")?;
    let manifest = load_manifest(data)?;
    let shortest = manifest.videos.iter().map(|v| v.frames).min().unwrap_or(0);
    let mut m = RunManifest::new("plotdata", cfg, cfg.weaken.map(|w| w.seed));
    m.input(model_dir)?;
    m.input(data)?;
    let (model, _) = Model::load(model_dir)?;
    let ds = load_dataset(data)?;
    let classes = model.config.classes;
    create_dir(out)?;

    let curve_path = model_dir.join("curve.jsonl");
    if curve_path.is_file() {
        let curve: Vec<IterationLog> = read_jsonl(&curve_path)?;
        let mut s = String::from("iteration,lr,total,cls,reg,tra,rpn\n");
        for l in &curve {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                l.iteration, l.lr, l.loss.total, l.loss.det.cls, l.loss.det.reg, l.loss.det.tra, l.loss.rpn
            );
        }
        write_text(&out.join("loss_curve.csv"), &s)?;
    }

    let mut summary = PlotSummary::default();
    let t = Instant::now();
    let mut base: Option<Vec<VideoInference>> = None;
    let mut csv = String::from("stride,frame_map,video_map\n");
    for &stride in &cfg.strides {
        if shortest < stride + 1 {
            continue;
        }
        let infs = apply_weakening(infer_all(&model, &ds.videos, stride)?, cfg.weaken.as_ref());
        let r = benchmark(&ds.videos, &infs, classes, &cfg.link, &cfg.eval)?;
        let _ = writeln!(csv, "{stride},{},{}", r.frame.mean_ap, r.video.mean_ap);
        summary.stride_sweep.push((stride, r.frame.mean_ap, r.video.mean_ap));
        if stride == 1 {
            base = Some(infs);
        }
    }
    write_text(&out.join("stride_sweep.csv"), &csv)?;
    m.time("stride_sweep", t);

    let t = Instant::now();
    let base = match base {
        Some(b) => b,
        None => apply_weakening(infer_all(&model, &ds.videos, 1)?, cfg.weaken.as_ref()),
    };
    let mut csv = String::from("alpha,causal,video_map\n");
    let mut plain = Vec::new();
    for causal in [false, true] {
        for &alpha in &cfg.alphas {
            let link = LinkConfig { alpha, causal, ..cfg.link };
            let r = benchmark(&ds.videos, &base, classes, &link, &cfg.eval)?;
            let _ = writeln!(csv, "{alpha},{causal},{}", r.video.mean_ap);
            summary.alpha_sweep.push((alpha, causal, r.video.mean_ap));
            if !causal {
                plain.push(r.video.mean_ap);
            }
        }
    }
    summary.alpha_spread = plain.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
        - plain.iter().cloned().fold(f64::INFINITY, f64::min);
    write_text(&out.join("alpha_sweep.csv"), &csv)?;
    m.time("alpha_sweep", t);

    let mut frame = Vec::new();
    let mut video = Vec::new();
    let mut gts = Vec::new();
    for (i, inf) in base.iter().enumerate() {
        frame.extend(scored_boxes(i, &frame_level(&inf.detections, classes, &cfg.link)));
        video.extend(scored_boxes(i, &link_inference(inf, classes, &cfg.link)?.0));
        gts.extend(processed_ground_truth(i, &ds.videos[i], &inf.keyframes));
    }
    write_pr_curves(out, "pr_frame", &frame, &gts, classes, cfg.eval.iou_thresh)?;
    write_pr_curves(out, "pr_video", &video, &gts, classes, cfg.eval.iou_thresh)?;
    write_json(&out.join("summary.json"), &summary)?;
    m.finish(out, start)
}
