//! Command-line interface for the two-stage counting pipeline.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use colorcount::color_space::load_image;
use colorcount::density::{
    count_from_density, density_from_points, synth_corpus, HeadAnnotations, KernelMode,
    SynthConfig,
};
use colorcount::error::{Error, Result};
use colorcount::eval::{evaluate_model, render_artifacts};
use colorcount::io::{load_annotations, save_annotations, save_npy_2d};
use colorcount::pipeline::{
    finetune, load_checkpoint, load_dataset, pretrain, save_dataset, train_from_scratch,
    TrainConfig,
};
use colorcount::priors::{
    cluster_groups, keyword_groups, ranking_crops, ranking_group_labels, KeywordVocabulary,
};

#[derive(Parser)]
#[command(name = "colorcount", about = "Colorization-pretrained crowd counting", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum DensityMode {
    Adaptive,
    Fixed,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum PriorMethod {
    Ranking,
    Cluster,
    Keyword,
}

#[derive(Subcommand)]
enum Command {
    /// Render annotation point lists into density-map NPY files.
    Density {
        /// JSON-lines annotation file; image paths are resolved relative to it.
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long, value_enum, default_value = "adaptive")]
        mode: DensityMode,
        /// Adaptive bandwidth factor on the mean neighbor distance.
        #[arg(long, default_value_t = 0.3)]
        beta: f64,
        /// Neighbors considered by the adaptive bandwidth.
        #[arg(long, default_value_t = 3)]
        k: usize,
        /// Kernel width for fixed mode.
        #[arg(long, default_value_t = 4.0)]
        sigma: f64,
        /// Directory receiving one .npy per annotated image.
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic crowd corpus (images + annotations).
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 300)]
        n: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 128)]
        height: usize,
        #[arg(long, default_value_t = 128)]
        width: usize,
    },
    /// Write crowd-level group labels into a dataset's annotations.
    Priors {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        method: PriorMethod,
        #[arg(long, default_value_t = 3)]
        m: u8,
        /// Output dataset for the ranking method (which derives a crop
        /// corpus instead of relabeling in place).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Stage 1: colorization pretraining on an unlabeled corpus.
    Pretrain {
        #[arg(long)]
        data: PathBuf,
        /// TOML training configuration; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a stage-1 checkpoint written with the same config.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Stage 2: fine-tune counting from a stage-1 checkpoint.
    Finetune {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Labeled-subset fraction override.
        #[arg(long)]
        fraction: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Stage-2 baseline: train counting from random initialization.
    Scratch {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        fraction: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score a stage-2 checkpoint on a labeled set (MAE / MSE report).
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Report CSV path.
        #[arg(long)]
        out: PathBuf,
        /// Images are resized to size x size (multiple of 32).
        #[arg(long, default_value_t = 128)]
        size: usize,
    },
    /// Render per-image PNG panels for a checkpoint.
    Render {
        #[arg(long)]
        ckpt: PathBuf,
        /// Dataset directory with the images to render.
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 128)]
        size: usize,
    },
}

fn stage_config(path: Option<&Path>, stage: u8) -> Result<TrainConfig> {
    let cfg = match path {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig { stage, ..Default::default() },
    };
    if cfg.stage != stage {
        return Err(Error::invalid(format!(
            "this command trains stage {stage}, but the config says stage {}",
            cfg.stage
        )));
    }
    Ok(cfg)
}

fn npy_name(image_path: &str) -> String {
    let stem = Path::new(image_path)
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "density".to_string());
    format!("{stem}.npy")
}

fn run() -> Result<()> {
    match Cli::parse().command {
        Command::Density { annotations, mode, beta, k, sigma, out } => {
            let records = load_annotations(&annotations)?;
            let base = annotations.parent().unwrap_or(Path::new("."));
            std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            let kernel = match mode {
                DensityMode::Adaptive => KernelMode::Adaptive { beta, k },
                DensityMode::Fixed => KernelMode::Fixed { sigma },
            };
            for rec in &records {
                let img = load_image(&base.join(&rec.image_path))?;
                let ann =
                    HeadAnnotations::new(rec.points.clone(), (img.height(), img.width()))?;
                let density = density_from_points(&ann, kernel)?;
                let path = out.join(npy_name(&rec.image_path));
                save_npy_2d(&path, &density.values)?;
                println!(
                    "{} -> {} (count {:.3})",
                    rec.image_path,
                    path.display(),
                    count_from_density(&density)
                );
            }
            println!("wrote {} density maps", records.len());
        }
        Command::Synth { out, n, seed, height, width } => {
            let config = SynthConfig { height, width, ..Default::default() };
            let scenes = synth_corpus(&config, n, seed)?;
            save_dataset(&out, &scenes)?;
            let total: usize = scenes.iter().map(|s| s.annotations.count()).sum();
            println!("wrote {n} scenes ({total} heads) to {}", out.display());
        }
        Command::Priors { data, method, m, out } => match method {
            PriorMethod::Cluster => {
                let scenes = load_dataset(&data)?;
                let images: Vec<_> = scenes.iter().map(|s| s.image.clone()).collect();
                let labels = cluster_groups(&images, m as usize)?;
                let mut records = load_annotations(&data.join("annotations.jsonl"))?;
                for (rec, label) in records.iter_mut().zip(&labels) {
                    rec.group = Some(label.group);
                }
                save_annotations(&data.join("annotations.jsonl"), &records)?;
                println!("clustered {} images into {} groups", records.len(), m);
            }
            PriorMethod::Keyword => {
                let vocab = KeywordVocabulary::default();
                let mut records = load_annotations(&data.join("annotations.jsonl"))?;
                for rec in records.iter_mut() {
                    let tag = vocab
                        .map
                        .keys()
                        .find(|word| rec.image_path.contains(word.as_str()))
                        .cloned()
                        .unwrap_or_else(|| rec.image_path.clone());
                    rec.group = Some(keyword_groups(&tag, &vocab)?.group);
                }
                save_annotations(&data.join("annotations.jsonl"), &records)?;
                println!("tagged {} images by filename keyword", records.len());
            }
            PriorMethod::Ranking => {
                let out = out.ok_or_else(|| {
                    Error::invalid("the ranking method derives a crop corpus; pass --out")
                })?;
                let scenes = load_dataset(&data)?;
                let mut crops = Vec::new();
                for scene in &scenes {
                    let seq = ranking_crops(&scene.image, m as usize, 0.75)?;
                    let labels = ranking_group_labels(&seq, m)?;
                    for (crop, label) in seq.crops.iter().zip(&labels) {
                        crops.push((crop.image.clone(), label.group));
                    }
                }
                std::fs::create_dir_all(out.join("images")).map_err(|e| Error::io(&out, e))?;
                let mut records = Vec::new();
                for (i, (img, group)) in crops.iter().enumerate() {
                    let rel = format!("images/{i:04}.png");
                    colorcount::color_space::save_png(&out.join(&rel), img)?;
                    records.push(colorcount::io::AnnotationRecord {
                        image_path: rel,
                        points: Vec::new(),
                        group: Some(*group),
                    });
                }
                save_annotations(&out.join("annotations.jsonl"), &records)?;
                println!(
                    "derived {} ordinal crops from {} images into {}",
                    records.len(),
                    scenes.len(),
                    out.display()
                );
            }
        },
        Command::Pretrain { data, config, out, resume } => {
            let cfg = stage_config(config.as_deref(), 1)?;
            let scenes = load_dataset(&data)?;
            let outcome = pretrain(&scenes, &cfg, &out, resume.as_deref())?;
            let last = outcome.probe_history.last().expect("probe history is never empty");
            println!(
                "pretrained {} epochs ({} steps); final probe total {:.6}",
                cfg.epoch_count(),
                outcome.log_rows.len(),
                last.losses.total
            );
            println!("checkpoint: {}", outcome.checkpoint.display());
        }
        Command::Finetune { ckpt, data, config, out, fraction, seed } => {
            let mut cfg = stage_config(config.as_deref(), 2)?;
            if let Some(f) = fraction {
                cfg.subset_fraction = f;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let stage1 = load_checkpoint(&ckpt)?;
            let scenes = load_dataset(&data)?;
            let outcome = finetune(&stage1, &scenes, &cfg, &out)?;
            report_stage2("fine-tuned", &outcome.metrics);
            println!("checkpoint: {}", outcome.checkpoint.display());
        }
        Command::Scratch { data, config, out, fraction, seed } => {
            let mut cfg = stage_config(config.as_deref(), 2)?;
            if let Some(f) = fraction {
                cfg.subset_fraction = f;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let scenes = load_dataset(&data)?;
            let outcome = train_from_scratch(&scenes, &cfg, &out)?;
            report_stage2("trained", &outcome.metrics);
            println!("checkpoint: {}", outcome.checkpoint.display());
        }
        Command::Eval { ckpt, data, out, size } => {
            let checkpoint = load_checkpoint(&ckpt)?;
            let scenes = load_dataset(&data)?;
            let report = evaluate_model(&checkpoint, &scenes, size, Some(&out))?;
            println!(
                "{} images: MAE {:.4}, MSE {:.4} -> {}",
                report.n_images,
                report.mae,
                report.mse,
                out.display()
            );
        }
        Command::Render { ckpt, images, out, size } => {
            let checkpoint = load_checkpoint(&ckpt)?;
            let scenes = load_dataset(&images)?;
            let files = render_artifacts(&checkpoint, &scenes, size, &out)?;
            println!("wrote {} panels to {}", files.len(), out.display());
        }
    }
    Ok(())
}

fn report_stage2(verb: &str, metrics: &[colorcount::pipeline::EpochMetrics]) {
    match metrics.last() {
        Some(last) => match last.val_mae {
            Some(v) => println!(
                "{verb} {} epochs; train MAE {:.4}, val MAE {:.4}",
                metrics.len(),
                last.train_mae,
                v
            ),
            None => println!("{verb} {} epochs; train MAE {:.4}", metrics.len(), last.train_mae),
        },
        None => println!("{verb} 0 epochs (initialization only)"),
    }
}

fn main() {
    if let Err(err) = run() {
        eprintln!("error: {err}");
        std::process::exit(1);
    }
}
