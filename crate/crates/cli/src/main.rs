use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;

use textspot_core::checkpoint::Checkpoint;
use textspot_core::config::{parse_size, Config};
use textspot_core::dataset::{generate_dataset, read_ppm, write_json, write_ppm, Dataset};
use textspot_core::eval::evaluate_model;
use textspot_core::overlay::draw_overlay;
use textspot_core::train::{fine_tune, Trainer};
use textspot_core::{Error, Result};

#[derive(Parser)]
#[command(name = "textspot", version, about = "Text localization and recognition on synthetic documents")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Gen {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        seed: u64,
        /// Image size as HxW.
        #[arg(long)]
        size: Option<String>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train a model from scratch.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Metrics log path (default: <out>.metrics.jsonl).
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Continue training a checkpoint on another dataset.
    Finetune {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        epochs: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Score a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        iou: f64,
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Detect and read text in one image.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        overlay: Option<PathBuf>,
        #[arg(long)]
        json: Option<PathBuf>,
        #[arg(long)]
        threshold: Option<f64>,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Io { .. } | Error::Dataset(_) | Error::Corrupt(_) | Error::Version { .. } | Error::Json(_) => 3,
        _ => 1,
    }
}

fn load_config(path: Option<&Path>) -> Result<Config> {
    match path {
        Some(p) => Config::load(p),
        None => Ok(Config::default()),
    }
}

fn default_log(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".metrics.jsonl");
    PathBuf::from(s)
}

fn open_log(path: &Path) -> Result<fs::File> {
    fs::File::create(path).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })
}

fn check_threshold(t: Option<f64>) -> Result<()> {
    match t {
        Some(v) if !(0.0..=1.0).contains(&v) => Err(Error::Config(format!("threshold must lie in [0, 1], got {v}"))),
        _ => Ok(()),
    }
}

#[derive(Serialize)]
struct JsonDetection {
    cx: f64,
    cy: f64,
    w: f64,
    h: f64,
    theta_deg: f64,
    score: f64,
    transcript: String,
}

#[derive(Serialize)]
struct InferOutput {
    image: String,
    detections: Vec<JsonDetection>,
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen { out, count, seed, size, config } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(s) = size {
                (cfg.gen.height, cfg.gen.width) = parse_size(&s)?;
            }
            cfg.validate()?;
            let m = generate_dataset(&out, count, seed, &cfg.gen, &cfg.model.alphabet)?;
            eprintln!("wrote {} documents to {} ({} lines dropped)", m.count, out.display(), m.lines_dropped);
        }
        Command::Train { data, out, config, epochs, seed, log } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            cfg.validate()?;
            let ds = Dataset::load(&data)?;
            check_transcripts(&ds, &cfg)?;
            let mut trainer = Trainer::new(cfg.clone())?;
            let log_path = log.unwrap_or_else(|| default_log(&out));
            let mut log_file = open_log(&log_path)?;
            eprintln!(
                "training {} parameters on {} samples for {} epochs",
                trainer.model.num_parameters(),
                ds.len(),
                cfg.train.epochs
            );
            trainer.train(&ds.samples, cfg.train.epochs, Some(&mut log_file), Some(&out), |e| {
                eprintln!("epoch {:>4}  loss {:.4}  ({:.1}s)", e.epoch, e.loss.total, e.seconds);
            })?;
            log_file.flush().map_err(|e| Error::Io { path: log_path, source: e })?;
        }
        Command::Finetune { ckpt, data, epochs, out, log } => {
            let ck = Checkpoint::load(&ckpt)?;
            let ds = Dataset::load(&data)?;
            check_transcripts(&ds, &ck.config)?;
            let log_path = log.unwrap_or_else(|| default_log(&out));
            let mut log_file = open_log(&log_path)?;
            let t = fine_tune(&ck, &ds.samples, epochs, Some(&mut log_file), Some(&out))?;
            eprintln!("fine-tuned to epoch {}", t.epoch);
        }
        Command::Eval { ckpt, data, iou, report, threshold } => {
            check_threshold(threshold)?;
            if !(0.0..=1.0).contains(&iou) {
                return Err(Error::Config(format!("iou must lie in [0, 1], got {iou}")));
            }
            let ck = Checkpoint::load(&ckpt)?;
            let model = ck.to_model()?;
            let ds = Dataset::load(&data)?;
            let mut infer = ck.config.infer.clone();
            if let Some(t) = threshold {
                infer.score_threshold = t;
            }
            let r = evaluate_model(&model, &ds.samples, &infer, iou)?;
            match report {
                Some(p) => write_json(&p, &r)?,
                None => println!("{}", serde_json::to_string_pretty(&r)?),
            }
            eprintln!(
                "localization AP {:.4}  end-to-end AP {:.4}  f-score {:.4}",
                r.localization_ap, r.end_to_end_ap, r.f_score
            );
        }
        Command::Infer { ckpt, image, overlay, json, threshold } => {
            check_threshold(threshold)?;
            let ck = Checkpoint::load(&ckpt)?;
            let model = ck.to_model()?;
            let img = read_ppm(&image)?;
            let mut infer = ck.config.infer.clone();
            if let Some(t) = threshold {
                infer.score_threshold = t;
            }
            let dets = model.detect(&img, &infer)?;
            if let Some(p) = overlay {
                let boxes: Vec<_> = dets.iter().map(|d| d.text_box.clone()).collect();
                write_ppm(&p, &draw_overlay(&img, &boxes))?;
            }
            let out = InferOutput {
                image: image.display().to_string(),
                detections: dets
                    .iter()
                    .map(|d| {
                        let b = &d.text_box;
                        JsonDetection {
                            cx: b.cx,
                            cy: b.cy,
                            w: b.w,
                            h: b.h,
                            theta_deg: b.theta.to_degrees(),
                            score: b.score,
                            transcript: b.transcript.clone().unwrap_or_default(),
                        }
                    })
                    .collect(),
            };
            match json {
                Some(p) => write_json(&p, &out)?,
                None => println!("{}", serde_json::to_string_pretty(&out)?),
            }
        }
    }
    Ok(())
}

/// Rejects datasets whose transcripts use characters outside the model alphabet.
fn check_transcripts(ds: &Dataset, cfg: &Config) -> Result<()> {
    for s in &ds.samples {
        for b in &s.boxes {
            if let Some(t) = &b.transcript {
                cfg.model
                    .alphabet
                    .encode(t)
                    .map_err(|e| Error::Dataset(format!("{}: {e}", s.name)))?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
