use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use log::info;

use pbd_core::annotation::{read_manifest, write_manifest, EndpointAnnotation};
use pbd_core::harness::annotate::{dedup, settle, AnnotationBundle, Embedder, EncoderEmbedder, ThumbnailEmbedder};
use pbd_core::harness::{self, evaluate_model, evaluate_predictions, load_config, load_split, train, EvaluationReport, PipelineConfig};
use pbd_core::imaging::load_gray;
use pbd_core::metrics::NormalizationMode;
use pbd_core::model::checkpoint::{load_checkpoint, save_checkpoint};
use pbd_core::synth::make_dataset;

#[derive(Parser)]
#[command(name = "pbd", version, about = "Battery plate endpoint detection toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Pixel,
    Paper,
}

impl From<Mode> for NormalizationMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Pixel => NormalizationMode::Pixel,
            Mode::Paper => NormalizationMode::Paper,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic dataset.
    Generate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model on the train split of a dataset.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint path to write.
        #[arg(long)]
        out: PathBuf,
        /// Loss curve, one JSON object per iteration.
        #[arg(long)]
        curve: Option<PathBuf>,
        #[arg(long)]
        iterations: Option<usize>,
    },
    /// Score a checkpoint on a split, or score a prediction manifest.
    Evaluate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, requires = "data")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, conflicts_with = "checkpoint", requires = "gt")]
        pred: Option<PathBuf>,
        #[arg(long)]
        gt: Option<PathBuf>,
        #[arg(long, value_enum)]
        mode: Option<Mode>,
        /// Directory for report.txt, report.jsonl and predictions.jsonl.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Cluster near-duplicate images.
    Dedup {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Directory of PNG images.
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        threshold: Option<f64>,
        /// Embed with this checkpoint's encoder instead of thumbnails.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fuse multi-annotator manifests into one.
    Fuse {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Manifests, one per annotator.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        eps: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the table of a report.jsonl.
    Report {
        input: PathBuf,
    },
}

fn config(path: &Option<PathBuf>) -> Result<PipelineConfig> {
    match path {
        Some(p) => Ok(load_config(p)?),
        None => Ok(PipelineConfig::default()),
    }
}

fn write_report(report: &EvaluationReport, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    fs::write(dir.join("report.txt"), report.table())?;
    fs::write(dir.join("report.jsonl"), report.records())?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let device = harness::device()?;
    info!("device: {device}");
    match cli.command {
        Command::Generate { config: c, out, seed } => {
            let mut cfg = config(&c)?;
            if let Some(s) = seed {
                cfg.dataset.seed = s;
            }
            let ds = make_dataset(&cfg.dataset, &out)?;
            println!("wrote {} train and {} test images to {}", ds.train.len(), ds.test.len(), out.display());
        }
        Command::Train {
            config: c,
            data,
            out,
            curve,
            iterations,
        } => {
            let mut cfg = config(&c)?;
            if iterations.is_some() {
                cfg.train.max_iterations = iterations;
            }
            let samples = load_split(&data, "train")?;
            let mut log = match &curve {
                Some(p) => Some(fs::File::create(p).with_context(|| format!("creating {}", p.display()))?),
                None => None,
            };
            let outcome = train(&cfg.train, &cfg.model, &samples, |it| {
                if it.iteration % 25 == 0 {
                    info!("iter {} epoch {} loss {:.4}", it.iteration, it.epoch, it.loss);
                }
                if let Some(f) = log.as_mut() {
                    let _ = writeln!(f, "{}", serde_json::to_string(it).expect("log serializes"));
                }
            })?;
            save_checkpoint(&out, &outcome.model, Some(&outcome.default_prompt))?;
            let last = outcome.curve.last().map(|l| l.loss).unwrap_or(f64::NAN);
            println!("trained {} iterations, final loss {last:.4}; checkpoint {}", outcome.curve.len(), out.display());
        }
        Command::Evaluate {
            config: c,
            checkpoint,
            data,
            split,
            pred,
            gt,
            mode,
            out,
        } => {
            let mut cfg = config(&c)?;
            if let Some(m) = mode {
                cfg.evaluate.mode = m.into();
            }
            let report = if let Some(ckpt) = checkpoint {
                let (model, prompt) = load_checkpoint::<f32>(&ckpt)?;
                let prompt = prompt.context("checkpoint has no stored prompt")?;
                let samples = load_split(data.as_ref().expect("clap requires data"), &split)?;
                let (report, preds) = evaluate_model(&model, &prompt, &samples, &cfg.evaluate)?;
                if let Some(dir) = &out {
                    fs::create_dir_all(dir)?;
                    write_manifest(dir.join("predictions.jsonl"), &preds)?;
                }
                report
            } else if let (Some(p), Some(g)) = (pred, gt) {
                let settings = pbd_core::harness::EvalSettings {
                    seg_policy: None,
                    ..cfg.evaluate.clone()
                };
                evaluate_predictions(&read_manifest(p)?, &read_manifest(g)?, None, &settings)?
            } else {
                bail!("pass either --checkpoint with --data, or --pred with --gt");
            };
            print!("{}", report.table());
            if let Some(dir) = &out {
                write_report(&report, dir)?;
            }
        }
        Command::Dedup {
            config: c,
            images,
            threshold,
            checkpoint,
            out,
        } => {
            let cfg = config(&c)?;
            let tau = threshold.unwrap_or(cfg.annotate.dedup_threshold);
            let mut files: Vec<PathBuf> = fs::read_dir(&images)
                .with_context(|| format!("reading {}", images.display()))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|e| e == "png"))
                .collect();
            files.sort();
            let ids: Vec<String> = files
                .iter()
                .map(|p| p.file_stem().unwrap_or_default().to_string_lossy().into_owned())
                .collect();
            let loaded = checkpoint.map(|p| load_checkpoint::<f32>(p)).transpose()?;
            let thumb = ThumbnailEmbedder::default();
            let embedder: Box<dyn Embedder + '_> = match &loaded {
                Some((model, _)) => Box::new(EncoderEmbedder { model }),
                None => Box::new(thumb),
            };
            let features = files
                .iter()
                .map(|p| embedder.embed(&load_gray(p)?))
                .collect::<pbd_core::Result<Vec<_>>>()?;
            let result = dedup(&ids, &features, tau)?;
            let mut text = String::new();
            for (members, rep) in result.clusters.iter().zip(&result.representatives) {
                let names: Vec<&str> = members.iter().map(|&i| ids[i].as_str()).collect();
                text.push_str(&serde_json::to_string(&serde_json::json!({
                    "representative": ids[*rep],
                    "members": names,
                }))?);
                text.push('\n');
            }
            println!("{} images, {} clusters", ids.len(), result.clusters.len());
            match out {
                Some(p) => fs::write(p, text)?,
                None => print!("{text}"),
            }
        }
        Command::Fuse { config: c, inputs, eps, out } => {
            let cfg = config(&c)?;
            let eps = eps.unwrap_or(cfg.annotate.deviation_px);
            let mut by_id: BTreeMap<String, Vec<EndpointAnnotation>> = BTreeMap::new();
            for p in &inputs {
                for a in read_manifest(p)? {
                    by_id.entry(a.image_id.clone()).or_default().push(a);
                }
            }
            let mut fused = Vec::with_capacity(by_id.len());
            for (id, anns) in by_id {
                let mut bundle = AnnotationBundle::new(anns)?;
                fused.push(settle(&mut bundle, eps, cfg.annotate.count_rule)?);
                println!("{id}: {}", bundle.flags.join("; "));
            }
            write_manifest(&out, &fused)?;
        }
        Command::Report { input } => {
            let text = fs::read_to_string(&input).with_context(|| format!("reading {}", input.display()))?;
            let mut cols = Vec::new();
            let mut mode = String::new();
            for line in text.lines().filter(|l| !l.trim().is_empty()) {
                let v: serde_json::Value = serde_json::from_str(line)?;
                mode = v["mode"].as_str().unwrap_or_default().to_string();
                let name = v["split"].as_str().unwrap_or("?").to_string();
                cols.push((name, serde_json::from_value(v)?));
            }
            println!("mode: {mode}");
            print!("{}", pbd_core::metrics::format_table(&cols));
        }
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
