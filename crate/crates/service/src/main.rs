use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use mcgan::checkpoint::Checkpoint;
use mcgan::data::{load_dataset, toy_dataset, write_toy_dataset, DatasetManifest, Split, ToyConfig, TrainingSet};
use mcgan::embedding::{toy_encode, AttributeSpec, ShapeKind, SizeClass, TextEmbedding, TOY_PALETTE};
use mcgan::experiments::{
    evaluate_toy, generate_one, run_interpolation, run_noise_sweep, run_switch_sweep, save_grid, save_metrics, Frame,
};
use mcgan::imageio::{load_rgb, resize_bilinear, save_mask, save_rgb};
use mcgan::trainer::{RunOptions, TrainConfig, TrainState};
use mcgan::{Generator, SwitchOverride};
use mcgan_service::api::{request_noise, AppState, Model};
use mcgan_service::http::serve;
use ndarray::{Array3, Axis};

#[derive(Parser)]
#[command(name = "mcgan", version, about = "Layered text-to-image generation on base images")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Training configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Checkpoint directory.
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    /// Fixed data order and single-threaded execution.
    #[arg(long, global = true)]
    deterministic: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Train on a dataset manifest or a freshly generated toy set.
    Train {
        /// Dataset manifest; without it a toy set is generated in memory.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Number of toy samples when no manifest is given.
        #[arg(long, default_value_t = 2000)]
        toy_samples: usize,
        /// Continue from the training checkpoint given by --checkpoint.
        #[arg(long)]
        resume: bool,
    },
    /// Write a procedural toy dataset directory.
    MakeToyData {
        #[arg(long, default_value_t = 2000)]
        count: usize,
        /// Samples at the end reserved for the test split.
        #[arg(long, default_value_t = 100)]
        test: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 1024)]
        text_dim: usize,
    },
    /// Generate one object onto a base image.
    Generate {
        #[command(flatten)]
        input: Input,
        /// Constant switch value in [0, 1]; learned switches when absent.
        #[arg(long)]
        switch: Option<f64>,
    },
    /// Outputs along a line between two captions.
    Interpolate {
        #[command(flatten)]
        input: Input,
        /// Second caption as toy attributes.
        #[arg(long)]
        attrs2: String,
        #[arg(long, default_value_t = 8)]
        steps: usize,
    },
    /// Outputs for noise vectors between all-zero and all-one.
    NoiseSweep {
        #[command(flatten)]
        input: Input,
        #[arg(long, default_value_t = 8)]
        steps: usize,
    },
    /// Outputs with switches forced to 0, 0.5, 1 and learned.
    SwitchSweep {
        #[command(flatten)]
        input: Input,
    },
    /// Switch activation inside vs outside true masks on held-out toy samples,
    /// with background L1 and mask IoU.
    SwitchStats {
        #[arg(long, default_value_t = 100)]
        samples: usize,
    },
    /// Serve the HTTP API.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: String,
        /// Embedding table for row and caption references.
        #[arg(long)]
        embeddings: Option<PathBuf>,
    },
}

#[derive(Args, Clone)]
struct Input {
    /// Base image PNG; a toy background is drawn when absent.
    #[arg(long)]
    base: Option<PathBuf>,
    /// Caption as toy attributes: shape,color,size, e.g. `ellipse,0,large`
    /// where color indexes the toy palette.
    #[arg(long, default_value = "ellipse,0,large")]
    attrs: String,
}

fn parse_attrs(s: &str) -> anyhow::Result<AttributeSpec> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    let [shape, color, size] = parts[..] else {
        bail!("attributes must be shape,color,size; got {s:?}");
    };
    let shape = match shape {
        "ellipse" => ShapeKind::Ellipse,
        "rectangle" => ShapeKind::Rectangle,
        "triangle" => ShapeKind::Triangle,
        other => bail!("unknown shape {other:?}"),
    };
    let idx: usize = color.parse().context("color must be a palette index")?;
    let color = *TOY_PALETTE.get(idx).context("palette index out of range")?;
    let size = match size {
        "small" => SizeClass::Small,
        "medium" => SizeClass::Medium,
        "large" => SizeClass::Large,
        other => bail!("unknown size {other:?}"),
    };
    Ok(AttributeSpec { shape, color, size })
}

fn generator(common: &Common) -> anyhow::Result<Generator<f32>> {
    let dir = common.checkpoint.as_ref().context("--checkpoint is required")?;
    Ok(Checkpoint::load(dir)?.generator()?)
}

fn base_image(input: &Input, gen: &Generator<f32>, seed: u64) -> anyhow::Result<Array3<f32>> {
    let hp = gen.hyperparams();
    Ok(match &input.base {
        Some(p) => {
            let b = load_rgb(p)?;
            resize_bilinear(b.view(), hp.height, hp.width)
        }
        None => {
            let toy = ToyConfig {
                size: hp.width,
                text_dim: hp.text_dim,
                ..ToyConfig::default()
            };
            toy_dataset(1, seed, &toy)?.remove(0).background
        }
    })
}

fn embed(attrs: &str, gen: &Generator<f32>) -> anyhow::Result<TextEmbedding> {
    Ok(toy_encode(&parse_attrs(attrs)?, gen.hyperparams().text_dim)?)
}

fn save_frames(frames: &[Frame], dir: &Path, name: &str) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir)?;
    save_grid(frames, &dir.join(format!("{name}.png")))?;
    Ok(())
}

fn train_config(common: &Common) -> anyhow::Result<TrainConfig> {
    let mut cfg = match &common.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::toy(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let c = &cli.common;
    let seed = c.seed.unwrap_or(0);
    if c.deterministic {
        log::info!("deterministic mode: fixed data order, single-threaded");
    }
    match &cli.command {
        Command::Train {
            data,
            toy_samples,
            resume,
        } => {
            let cfg = train_config(c)?;
            let hp = cfg.hyperparams.clone();
            let set = match data {
                Some(m) => {
                    let manifest = DatasetManifest::load(m)?;
                    load_dataset(&manifest, Split::Train, hp.width, hp.height, Some(hp.text_dim))?
                        .materialize(cfg.seed)?
                }
                None => {
                    let toy = ToyConfig {
                        size: hp.width,
                        text_dim: hp.text_dim,
                        ..ToyConfig::default()
                    };
                    TrainingSet::from_toy(&toy_dataset(*toy_samples, cfg.seed, &toy)?)?
                }
            };
            let mut state = if *resume {
                let dir = c.checkpoint.as_ref().context("--resume needs --checkpoint")?;
                TrainState::from_checkpoint(&Checkpoint::load(dir)?, Some(cfg))?
            } else {
                TrainState::new(cfg)?
            };
            let opts = RunOptions {
                out_dir: Some(c.out_dir.clone()),
                stop_at_step: None,
            };
            state.run(&set, &opts, |s| {
                log::info!("epoch {} done at step {}", s.epoch, s.step);
                Ok(())
            })?;
            log::info!("final checkpoint in {}", c.out_dir.join("checkpoints/final").display());
        }
        Command::MakeToyData {
            count,
            test,
            size,
            text_dim,
        } => {
            let toy = ToyConfig {
                size: *size,
                text_dim: *text_dim,
                ..ToyConfig::default()
            };
            let samples = toy_dataset(*count, seed, &toy)?;
            write_toy_dataset(&c.out_dir, &samples, *test)?;
            log::info!("wrote {count} samples to {}", c.out_dir.display());
        }
        Command::Generate { input, switch } => {
            let gen = generator(c)?;
            let b = base_image(input, &gen, seed)?;
            let phi = embed(&input.attrs, &gen)?;
            let hp = gen.hyperparams();
            let (eps, z) = request_noise(seed, hp.code_dim, hp.z_dim);
            let ov = switch.map_or(SwitchOverride::Learned, SwitchOverride::Constant);
            let out = generate_one(&gen, &b, &phi, &z, &eps, &ov)?;
            std::fs::create_dir_all(&c.out_dir)?;
            save_rgb(out.image.index_axis(Axis(0), 0), &c.out_dir.join("image.png"))?;
            save_mask(out.mask.index_axis(Axis(0), 0), &c.out_dir.join("mask.png"))?;
            save_rgb(b.view(), &c.out_dir.join("base.png"))?;
        }
        Command::Interpolate { input, attrs2, steps } => {
            let gen = generator(c)?;
            let b = base_image(input, &gen, seed)?;
            let hp = gen.hyperparams();
            let (eps, z) = request_noise(seed, hp.code_dim, hp.z_dim);
            let r = run_interpolation(&gen, &b, &embed(&input.attrs, &gen)?, &embed(attrs2, &gen)?, &z, &eps, *steps)?;
            save_frames(&r.frames, &c.out_dir, "interpolation")?;
            save_metrics(&r.metrics, &c.out_dir.join("interpolation.json"))?;
        }
        Command::NoiseSweep { input, steps } => {
            let gen = generator(c)?;
            let b = base_image(input, &gen, seed)?;
            let (eps, _) = request_noise(seed, gen.hyperparams().code_dim, gen.hyperparams().z_dim);
            let frames = run_noise_sweep(&gen, &b, &embed(&input.attrs, &gen)?, &eps, *steps)?;
            save_frames(&frames, &c.out_dir, "noise_sweep")?;
        }
        Command::SwitchSweep { input } => {
            let gen = generator(c)?;
            let b = base_image(input, &gen, seed)?;
            let hp = gen.hyperparams();
            let (eps, z) = request_noise(seed, hp.code_dim, hp.z_dim);
            let cfg = train_config(c)?;
            let r = run_switch_sweep(&gen, &b, &embed(&input.attrs, &gen)?, &z, &eps, &cfg.selector)?;
            save_frames(&r.frames, &c.out_dir, "switch_sweep")?;
            save_metrics(&r.metrics, &c.out_dir.join("switch_sweep.json"))?;
        }
        Command::SwitchStats { samples } => {
            let gen = generator(c)?;
            let hp = gen.hyperparams();
            let toy = ToyConfig {
                size: hp.width,
                text_dim: hp.text_dim,
                ..ToyConfig::default()
            };
            // Offset seed so the samples differ from a toy training set with the same seed.
            let held = toy_dataset(*samples, seed.wrapping_add(1_000_003), &toy)?;
            let cfg = train_config(c)?;
            let eval = evaluate_toy(&gen, &held, seed, &cfg.selector, 25)?;
            save_metrics(&eval, &c.out_dir.join("switch_stats.json"))?;
            println!("{}", serde_json::to_string_pretty(&eval)?);
        }
        Command::Serve { addr, embeddings } => {
            let dir = c.checkpoint.as_ref().context("--checkpoint is required")?;
            let model = Model::load(dir, embeddings.as_deref())?;
            let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
            rt.block_on(serve(Arc::new(AppState::with_model(model)), addr))?;
        }
    }
    Ok(())
}
