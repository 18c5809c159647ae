use std::sync::OnceLock;

use detrack::geometry::{iou, BBox};
use detrack::synthvid::{generate_dataset, Dataset, ShapeKind, SynthConfig};
use detrack::tensorops::FeatureMap;
use detrack::toynet::{
    evaluate_loss, forward_frame, forward_track, held_out_samples, propose, track_rois, train, Model, TrainConfig,
};

fn still_config() -> SynthConfig {
    SynthConfig {
        velocity: [0.0, 0.0],
        scale_change: [0.0, 0.0],
        ..Default::default()
    }
}

/// Trained once on videos without motion, shared by the tests below.
fn still_model() -> &'static Model {
    static MODEL: OnceLock<Model> = OnceLock::new();
    MODEL.get_or_init(|| {
        let ds = generate_dataset(&still_config(), 3).unwrap();
        train(&ds, &TrainConfig::default()).unwrap().model
    })
}

#[test]
fn smoothed_loss_decreases_over_first_hundred_iterations() {
    for seed in 0..4 {
        let tiny = SynthConfig {
            videos: 1,
            frames: 2,
            objects: [1, 1],
            ..Default::default()
        };
        let ds = generate_dataset(&tiny, seed).unwrap();
        let cfg = TrainConfig {
            iterations: 100,
            lr: 0.001,
            batch_pairs: 4,
            duplicate_prob: 0.0,
            seed,
            ..Default::default()
        };
        let curve = train(&ds, &cfg).unwrap().curve;
        let windows: Vec<f64> = curve
            .chunks(10)
            .map(|w| w.iter().map(|l| l.loss.total).sum::<f64>() / w.len() as f64)
            .collect();
        assert_eq!(windows.len(), 10);
        for pair in windows.windows(2) {
            assert!(pair[1] < pair[0], "seed {seed}: {windows:?}");
        }
    }
}

#[test]
fn held_out_loss_drops_fivefold() {
    let train_set = generate_dataset(&SynthConfig::default(), 1).unwrap();
    let test = generate_dataset(&SynthConfig { videos: 10, ..Default::default() }, 2).unwrap();
    let cfg = TrainConfig {
        iterations: 600,
        lr_step: 440,
        ..Default::default()
    };
    let held = held_out_samples(&test, &cfg, 32, 5).unwrap();
    let before = evaluate_loss(&Model::init(&cfg.model, cfg.seed).unwrap(), &held).unwrap().total;
    let after = evaluate_loss(&train(&train_set, &cfg).unwrap().model, &held).unwrap().total;
    assert!(before >= 5.0 * after, "untrained {before}, trained {after}");
}

fn mean_abs_track_delta(model: &Model, data: &Dataset) -> f64 {
    let (mut sum, mut n) = (0.0, 0);
    for v in &data.videos {
        for t in 0..v.len() - 1 {
            let a = forward_frame(model, &v.frames[t]).unwrap();
            let b = forward_frame(model, &v.frames[t + 1]).unwrap();
            let track = forward_track(model, &a, &b).unwrap();
            let boxes: Vec<BBox> = v.annotations[t].iter().map(|x| x.bbox).collect();
            for d in track_rois(model, &track, &boxes).unwrap() {
                sum += d.to_array().iter().map(|x| x.abs()).sum::<f64>() / 4.0;
                n += 1;
            }
        }
    }
    sum / n as f64
}

#[test]
fn still_objects_are_tracked_in_place() {
    let test = generate_dataset(&SynthConfig { videos: 4, ..still_config() }, 4).unwrap();
    let m = mean_abs_track_delta(still_model(), &test);
    assert!(m < 0.05, "mean |delta| component {m}");
}

#[test]
fn single_bright_object_gets_the_top_proposal() {
    let model = still_model();
    for k in 0..6 {
        let (x0, y0) = (6 + 5 * k, 28 - 3 * k);
        let color = ShapeKind::Square.color();
        let frame = FeatureMap::from_fn(48, 48, 3, |i, j, c| {
            if (y0..y0 + 12).contains(&i) && (x0..x0 + 12).contains(&j) {
                color[c]
            } else {
                0.1
            }
        });
        let gt = BBox::from_corners(x0 as f64, y0 as f64, (x0 + 12) as f64, (y0 + 12) as f64);
        let top = propose(model, &frame, 1).unwrap();
        assert_eq!(top.len(), 1);
        let o = iou(&top[0].bbox, &gt).unwrap();
        assert!(o > 0.5, "object at ({x0}, {y0}): IoU {o}");
        let [x1, y1, x2, y2] = top[0].bbox.corners();
        assert!(x1 >= 0.0 && y1 >= 0.0 && x2 <= 48.0 && y2 <= 48.0);
    }
}
