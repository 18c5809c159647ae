//! Trains the same network with and without the tracking loss and compares
//! held-out frame-level and linked mAP.
//!
//! `cargo run --release -p detrack --example detection_only -- [iterations] [seeds]`

use detrack::evalmap::EvalConfig;
use detrack::linker::LinkConfig;
use detrack::pipeline::{benchmark, infer_all};
use detrack::synthvid::{generate_dataset, SynthConfig};
use detrack::toynet::{train, TrainConfig};

fn main() -> detrack::Result<()> {
    let mut args = std::env::args().skip(1);
    let iterations: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(1500);
    let seeds: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(1);
    let synth = SynthConfig::default();
    let train_set = generate_dataset(&synth, 11)?;
    let test = generate_dataset(&SynthConfig { videos: 10, ..synth }, 12)?;
    println!("seed,detection_only,frame_map,video_map");
    for seed in 0..seeds {
        for detection_only in [false, true] {
            let cfg = TrainConfig {
                iterations,
                lr_step: iterations * 11 / 15,
                seed,
                detection_only,
                ..Default::default()
            };
            let model = train(&train_set, &cfg)?.model;
            let infs = infer_all(&model, &test.videos, 1)?;
            let r = benchmark(&test.videos, &infs, model.config.classes, &LinkConfig::default(), &EvalConfig::default())?;
            println!("{seed},{detection_only},{:.4},{:.4}", r.frame.mean_ap, r.video.mean_ap);
        }
    }
    Ok(())
}
