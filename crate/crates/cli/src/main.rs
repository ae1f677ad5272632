//! `tad`: synthesise data, train, detect, evaluate and inspect anchors.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use tad_core::anchors::assignment_histogram;
use tad_core::config::SEED_ENV;
use tad_core::data::{save_synth, Dataset, Split};
use tad_core::evaluator::{evaluate, DEFAULT_THRESHOLDS};
use tad_core::gradcheck::run_suite;
use tad_core::inference::detect_video;
use tad_core::io::{AnnotationFile, Checkpoint, DetectionFile};
use tad_core::synth::synth_dataset;
use tad_core::trainer::{fit, FitOptions};
use tad_core::{DetectorF32, RunConfig};

#[derive(Parser)]
#[command(name = "tad", version, about = "One-stage temporal action detection")]
struct Cli {
    /// Accepted for reproducible runs; every reduction is already single-threaded.
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset from the `[synth]` section of a config.
    Synth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on the train split; writes metrics.csv and checkpoints.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run sliding-window detection over one split.
    Infer {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
    },
    /// Score detections against annotations at tIoU 0.3..0.7.
    Eval {
        #[arg(long)]
        detections: PathBuf,
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Histogram of positive anchors per ground truth, by action scale.
    AnalyzeAnchors {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of every backward pass.
    Gradcheck {
        #[arg(long)]
        config: PathBuf,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Test => Split::Test,
        }
    }
}

fn load_config(path: &Path) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    if let Some(seed) = cfg.apply_seed_env().map_err(anyhow::Error::msg)? {
        info!("{SEED_ENV} overrides every seed with {seed}");
    }
    Ok(cfg)
}

fn new_model(cfg: &RunConfig) -> Result<DetectorF32> {
    Ok(DetectorF32::new(
        &cfg.net,
        &mut ChaCha8Rng::seed_from_u64(cfg.train.seed),
    )?)
}

fn check_classes(cfg: &RunConfig, data_classes: usize) -> Result<()> {
    if cfg.net.num_classes != data_classes {
        bail!(
            "config has net.num_classes = {} but the dataset has {data_classes} classes",
            cfg.net.num_classes
        );
    }
    Ok(())
}

fn synth(spec: &Path, out: &Path) -> Result<()> {
    let cfg = load_config(spec)?;
    let ds = synth_dataset(&cfg.synth)?;
    save_synth(&ds, out)?;
    println!(
        "wrote {} train and {} test videos to {}",
        ds.train.videos.len(),
        ds.test.videos.len(),
        out.display()
    );
    Ok(())
}

fn train(config: &Path, data: &Path, out: &Path) -> Result<()> {
    let cfg = load_config(config)?;
    let train = Dataset::load(data, Split::Train)?;
    check_classes(&cfg, train.num_classes)?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    cfg.save(&out.join("config.toml"))?;
    let mut model = new_model(&cfg)?;
    info!(
        "training {} parameters on {} videos",
        model.num_parameters(),
        train.videos.len()
    );
    let opts = FitOptions {
        train: &cfg.train,
        anchors: &cfg.anchors,
        loss: &cfg.loss,
        augment: &cfg.augment,
        out_dir: Some(out),
    };
    let summary = fit(&train, &mut model, &opts)?;
    if let Some(last) = summary.log.last() {
        println!(
            "{} iterations, final loss {:.4} (cls {:.4}, reg {:.4})",
            summary.log.len(),
            last.total,
            last.cls_loss,
            last.reg_loss
        );
    }
    for p in &summary.checkpoints {
        println!("checkpoint {}", p.display());
    }
    Ok(())
}

fn infer(config: &Path, checkpoint: &Path, data: &Path, out: &Path, split: Split) -> Result<()> {
    let cfg = load_config(config)?;
    let ds = Dataset::load(data, split)?;
    check_classes(&cfg, ds.num_classes)?;
    let mut model = new_model(&cfg)?;
    model.load_checkpoint(&Checkpoint::load(checkpoint)?)?;
    let mut dets = DetectionFile::default();
    for v in &ds.videos {
        let found = detect_video(&model, &v.input(), &cfg.anchors, &cfg.infer)
            .with_context(|| format!("video {}", v.annotation.id))?;
        dets.videos.insert(v.annotation.id.clone(), found);
    }
    dets.save(out)?;
    let total: usize = dets.videos.values().map(Vec::len).sum();
    println!("{total} detections over {} videos", dets.videos.len());
    Ok(())
}

fn eval(detections: &Path, annotations: &Path, out: &Path) -> Result<()> {
    let dets = DetectionFile::load(detections)?;
    let ann = AnnotationFile::load(annotations)?;
    let report = evaluate(&dets, &ann, &DEFAULT_THRESHOLDS)?;
    tad_core::io::write_atomic(out, report.to_csv().as_bytes())?;
    for (t, m) in report.thresholds.iter().zip(&report.map) {
        println!("mAP@{t:.1} {m:.4}");
    }
    println!("average mAP {:.4}", report.average_map);
    Ok(())
}

fn analyze_anchors(config: &Path, annotations: &Path, out: &Path) -> Result<()> {
    let cfg = load_config(config)?;
    let ann = AnnotationFile::load(annotations)?;
    let hist = assignment_histogram(&ann.videos, &cfg.anchors)?;
    tad_core::io::write_atomic(out, hist.to_csv().as_bytes())?;
    match hist.mean_all() {
        Some(m) => println!("mean positives per ground truth {m:.2}"),
        None => println!("no ground truths"),
    }
    Ok(())
}

fn gradcheck(config: &Path) -> Result<bool> {
    let cfg = load_config(config)?;
    let reports = run_suite(&cfg.gradcheck);
    for r in &reports {
        println!("{r}");
    }
    Ok(reports.iter().all(|r| r.passed()))
}

fn run(cli: Cli) -> Result<bool> {
    if cli.deterministic {
        info!("deterministic mode");
    }
    match cli.command {
        Command::Synth { spec, out } => synth(&spec, &out)?,
        Command::Train { config, data, out } => train(&config, &data, &out)?,
        Command::Infer {
            config,
            checkpoint,
            data,
            out,
            split,
        } => infer(&config, &checkpoint, &data, &out, split.into())?,
        Command::Eval {
            detections,
            annotations,
            out,
        } => eval(&detections, &annotations, &out)?,
        Command::AnalyzeAnchors {
            config,
            annotations,
            out,
        } => analyze_anchors(&config, &annotations, &out)?,
        Command::Gradcheck { config } => return gradcheck(&config),
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            warn!("gradient check failed");
            ExitCode::FAILURE
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
