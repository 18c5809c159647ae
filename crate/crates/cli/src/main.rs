use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};
use detrack::evalmap::{EvalConfig, Interpolation};
use detrack::gradsuite::TOLERANCE;
use detrack::linker::LinkConfig;
use detrack::pipeline::WeakenConfig;
use detrack::records::read_json;
use detrack::stages::{self, EvalReport, PlotConfig, RunManifest, Source};
use detrack::synthvid::SynthConfig;
use detrack::toynet::TrainConfig;
use serde_json::json;

#[derive(Parser)]
#[command(name = "detrack", version, about = "Detect and track objects in synthetic videos")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Gen {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the toy detector and tracker.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the config's iteration count.
        #[arg(long)]
        iterations: Option<usize>,
        /// Train without the tracking loss.
        #[arg(long)]
        detection_only: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Detect on every τ-th frame and track between processed frames.
    Infer {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 1)]
        stride: usize,
        /// Corrupt the scores of this fraction of processed frames.
        #[arg(long)]
        weaken: Option<f64>,
        #[arg(long, default_value_t = 0)]
        weaken_seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Link detections into tubes and rescore them.
    Link {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        alpha: f64,
        /// Rescore each box using only the tube prefix up to its frame.
        #[arg(long)]
        causal: bool,
        /// Average each detection's scores with its tracked partner's first.
        #[arg(long)]
        average_tracked: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compute per-class AP and mAP at IoU 0.5.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum, default_value_t = SourceArg::Linked)]
        source: SourceArg,
        #[arg(long)]
        eleven_point: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the finite-difference gradient suite.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write loss curves, PR curves and stride / alpha sweeps as CSV.
    Plotdata {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        weaken: Option<f64>,
        #[arg(long, default_value_t = 0)]
        weaken_seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SourceArg {
    Linked,
    Frame,
}

fn weakening(fraction: Option<f64>, seed: u64) -> anyhow::Result<Option<WeakenConfig>> {
    match fraction {
        None => Ok(None),
        Some(f) if (0.0..=1.0).contains(&f) => Ok(Some(WeakenConfig {
            frame_fraction: f,
            seed,
            ..Default::default()
        })),
        Some(f) => Err(detrack::Error::InvalidArgument(format!("--weaken must be in [0, 1], got {f}")).into()),
    }
}

fn summary(m: &RunManifest) -> serde_json::Value {
    json!({
        "command": m.command,
        "output": m.outputs.first().map(|o| &o.path),
        "sha256": m.outputs.first().map(|o| &o.sha256),
        "seconds": m.timings.get("total"),
    })
}

fn run(cmd: Command) -> anyhow::Result<ExitCode> {
    let manifest = match cmd {
        Command::Gen { config, seed, out } => {
            let cfg: SynthConfig = stages::load_config(config.as_deref())?;
            stages::gen(&cfg, seed, &out)?
        }
        Command::Train {
            data,
            config,
            seed,
            iterations,
            detection_only,
            out,
        } => {
            let mut cfg: TrainConfig = stages::load_config(config.as_deref())?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(n) = iterations {
                cfg.iterations = n;
            }
            cfg.detection_only |= detection_only;
            stages::train_stage(&data, &cfg, &out)?
        }
        Command::Infer {
            model,
            data,
            stride,
            weaken,
            weaken_seed,
            out,
        } => stages::infer_stage(&model, &data, stride, weakening(weaken, weaken_seed)?, &out)?,
        Command::Link {
            input,
            alpha,
            causal,
            average_tracked,
            out,
        } => {
            let cfg = LinkConfig {
                alpha,
                causal,
                average_tracked,
                ..Default::default()
            };
            stages::link_stage(&input, &cfg, &out)?
        }
        Command::Eval {
            data,
            input,
            source,
            eleven_point,
            out,
        } => {
            let source = match source {
                SourceArg::Linked => Source::Linked,
                SourceArg::Frame => Source::Frame,
            };
            let cfg = EvalConfig {
                interpolation: if eleven_point {
                    Interpolation::ElevenPoint
                } else {
                    Interpolation::AllPoints
                },
                ..Default::default()
            };
            let m = stages::eval_stage(&data, &input, source, &cfg, &out)?;
            let report: EvalReport = read_json(&out.join("report.json"))?;
            let mut s = summary(&m);
            s["mean_ap"] = json!(report.result.mean_ap);
            s["per_class_ap"] = json!(report.result.per_class_ap);
            println!("{s}");
            return Ok(ExitCode::SUCCESS);
        }
        Command::Gradcheck { seed, out } => {
            let (report, _) = stages::gradcheck_stage(seed, out.as_deref())?;
            println!("{:<24} {:>14} {:>8} {:>8}", "operation", "max_rel_error", "checked", "skipped");
            for e in &report.entries {
                println!("{:<24} {:>14.3e} {:>8} {:>8}", e.operation, e.max_rel_error, e.checked, e.skipped);
            }
            println!("suite time {:.2}s, tolerance {TOLERANCE:e}", report.seconds);
            if report.passes(TOLERANCE) {
                return Ok(ExitCode::SUCCESS);
            }
            let worst = report.max_error();
            eprintln!(
                "{}",
                json!({ "error": { "kind": "gradcheck", "message": format!("max relative error {worst:e} >= {TOLERANCE:e}") } })
            );
            return Ok(ExitCode::from(1));
        }
        Command::Plotdata {
            model,
            data,
            config,
            weaken,
            weaken_seed,
            out,
        } => {
            let mut cfg: PlotConfig = stages::load_config(config.as_deref())?;
            if let Some(w) = weakening(weaken, weaken_seed)? {
                cfg.weaken = Some(w);
            }
            stages::plotdata_stage(&model, &data, &cfg, &out)?
        }
    };
    println!("{}", summary(&manifest));
    Ok(ExitCode::SUCCESS)
}

fn error_json(e: &anyhow::Error) -> serde_json::Value {
    let (kind, message) = match e.downcast_ref::<detrack::Error>() {
        Some(d) => (d.kind(), d.to_string()),
        None => ("internal", format!("{e:#}")),
    };
    json!({ "error": { "kind": kind, "message": message } })
}

fn configure_threads() -> anyhow::Result<()> {
    let Ok(v) = std::env::var("DETRACK_THREADS") else { return Ok(()) };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| detrack::Error::InvalidArgument(format!("DETRACK_THREADS must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .context("configuring the thread pool")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprintln!("{}", json!({ "error": { "kind": "usage", "message": e.to_string().trim() } }));
            return ExitCode::from(2);
        }
    };
    match configure_threads().and_then(|_| run(cli.command)) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("{}", error_json(&e));
            ExitCode::from(1)
        }
    }
}
