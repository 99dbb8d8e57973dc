//! Command-line entry point: dataset preparation, the two pretraining
//! stages, adversarial training, generation and evaluation.

use std::path::PathBuf;
use std::process::ExitCode;

use candle_core::Device;
use clap::{Args, Parser, Subcommand};

use ocigen::config::{BoxSource, PipelineConfig};
use ocigen::data::{build_splits, Dataset, Loader, SplitIndex};
use ocigen::evaluation;
use ocigen::manifest::RunManifest;
use ocigen::pipeline::Pipeline;
use ocigen::training::pretrain;
use ocigen::training::trainer::Trainer;
use ocigen::{Error, Result};

#[derive(Parser)]
#[command(name = "ocigen", version, about = "Object+caption conditioned image generation")]
struct Cli {
    /// TOML config file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Dataset root (images/, annotations/, splits/). Falls back to the
    /// OCIGEN_DATA environment variable, then the config value.
    #[arg(long, global = true)]
    data_dir: Option<PathBuf>,

    /// Artifact directory for checkpoints, metrics and manifests.
    #[arg(long, global = true, default_value = "artifacts")]
    artifacts: PathBuf,

    /// Master seed override.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Use the small CPU-friendly preset as the config baseline.
    #[arg(long, global = true)]
    desk: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct FilterFlags {
    #[arg(long)]
    min_objects: Option<usize>,
    #[arg(long)]
    max_objects: Option<usize>,
    #[arg(long)]
    min_area_frac: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Emit a deterministic synthetic dataset of colored shapes.
    MakeSynthetic {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        n_images: usize,
        #[arg(long, default_value_t = 5)]
        n_categories: usize,
        #[arg(long, default_value_t = 30)]
        vocab_size: usize,
    },
    /// Filter annotations, build the vocabulary and write split indices.
    PrepareData {
        #[command(flatten)]
        filter: FilterFlags,
    },
    /// Stage one: word-level matching pretraining of the text encoder.
    PretrainText {
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Stage two: phrase-level matching pretraining of the graph modules.
    PretrainDamsm {
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Adversarial training of generator and critics.
    Train {
        #[arg(long)]
        iterations: Option<usize>,
        /// Resume from the newest checkpoint under the artifact directory.
        #[arg(long)]
        resume: bool,
    },
    /// Generate images for a scene description.
    Generate {
        /// Comma-separated object category names, e.g. "red block,green tile".
        #[arg(long)]
        objects: String,
        #[arg(long)]
        caption: String,
        #[arg(long, default_value_t = 0)]
        gen_seed: u64,
        #[arg(long)]
        stages: Option<usize>,
        #[arg(long, value_parser = parse_box_source)]
        box_source: Option<BoxSource>,
        #[arg(long, default_value = "samples")]
        out: PathBuf,
        /// Also write a side-by-side grid image.
        #[arg(long)]
        grid: bool,
    },
    /// Compute metrics on a split.
    Evaluate {
        #[arg(long, default_value = "val")]
        split: String,
        #[arg(long, default_value = "both", value_parser = ["is", "fid", "both"])]
        metric: String,
        #[arg(long)]
        n_images: Option<usize>,
        /// Training checkpoint step directory to load (defaults to latest).
        #[arg(long)]
        checkpoint: Option<String>,
    },
    /// Print the effective configuration.
    ConfigDump,
}

fn parse_box_source(s: &str) -> std::result::Result<BoxSource, String> {
    match s {
        "predicted" => Ok(BoxSource::Predicted),
        "ground_truth" | "gt" => Ok(BoxSource::GroundTruth),
        other => Err(format!("unknown box source `{other}` (predicted|ground_truth)")),
    }
}

fn effective_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = if cli.desk {
        PipelineConfig::desk_preset()
    } else {
        PipelineConfig::default()
    };
    if let Some(path) = &cli.config {
        cfg = PipelineConfig::from_file(path)?;
    }
    if let Some(dir) = &cli.data_dir {
        cfg.data.data_dir = dir.clone();
    } else if let Ok(env_dir) = std::env::var("OCIGEN_DATA") {
        cfg.data.data_dir = PathBuf::from(env_dir);
    }
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_dataset(cfg: &PipelineConfig) -> Result<Dataset> {
    Dataset::load(&cfg.data.data_dir, &cfg.data)
}

fn split_loader<'d>(
    cfg: &PipelineConfig,
    dataset: &'d Dataset,
    split: &str,
    resolutions: Vec<usize>,
) -> Result<Loader<'d>> {
    let splits_dir = cfg.data.data_dir.join("splits");
    let index = SplitIndex::load(&splits_dir, split).or_else(|_| {
        log::info!("split indices missing; building them now");
        build_splits(&cfg.data.data_dir, &cfg.data, cfg.train.seed).map(|(tr, va, te)| match split {
            "train" => tr,
            "val" => va,
            _ => te,
        })
    })?;
    Ok(Loader::new(
        dataset,
        index,
        resolutions,
        cfg.data.max_caption_len,
        cfg.train.seed,
        &Device::Cpu,
    ))
}

fn stage_resolutions(cfg: &PipelineConfig) -> Vec<usize> {
    (0..cfg.model.stages)
        .map(|s| cfg.model.stage_resolution(s))
        .collect()
}

fn run(cli: Cli) -> Result<()> {
    let cfg = effective_config(&cli)?;
    let device = Device::Cpu;
    match cli.command {
        Command::MakeSynthetic {
            out,
            n_images,
            n_categories,
            vocab_size,
        } => {
            let mut manifest = RunManifest::begin("make-synthetic", &cfg, cfg.train.seed);
            ocigen::data::synthetic::make_synthetic_dataset_with_vocab(
                &out,
                n_images,
                n_categories,
                vocab_size,
                cfg.train.seed,
            )?;
            manifest.add_artifact(&out);
            manifest.finish(&out)?;
            println!(
                "synthetic dataset with {n_images} images written to {}",
                out.display()
            );
        }
        Command::PrepareData { filter } => {
            let mut cfg = cfg;
            if let Some(v) = filter.min_objects {
                cfg.data.min_objects = v;
            }
            if let Some(v) = filter.max_objects {
                cfg.data.max_objects = v;
            }
            if let Some(v) = filter.min_area_frac {
                cfg.data.min_area_frac = v;
            }
            cfg.validate()?;
            let mut manifest = RunManifest::begin("prepare-data", &cfg, cfg.train.seed);
            let (train, val, test) = build_splits(&cfg.data.data_dir, &cfg.data, cfg.train.seed)?;
            let dataset = load_dataset(&cfg)?;
            let vocab_path = cfg.data.data_dir.join("vocab.txt");
            dataset.vocab.save(&vocab_path)?;
            manifest.add_artifact(&cfg.data.data_dir.join("splits"));
            manifest.add_artifact(&vocab_path);
            manifest.finish(&cfg.data.data_dir)?;
            println!(
                "splits: train {} / val {} / test {}; vocabulary {} tokens (hash {})",
                train.image_ids.len(),
                val.image_ids.len(),
                test.image_ids.len(),
                dataset.vocab.len(),
                dataset.vocab.hash()
            );
        }
        Command::PretrainText { steps } => {
            let dataset = load_dataset(&cfg)?;
            let top = cfg.model.max_resolution();
            let loader = split_loader(&cfg, &dataset, "train", vec![top])?;
            let mut pipeline = Pipeline::new(&cfg, &dataset, &device)?;
            let steps = steps.unwrap_or(cfg.damsm.text_steps);
            let mut manifest = RunManifest::begin("pretrain-text", &cfg, cfg.train.seed);
            let report = pretrain::pretrain_text_encoder(&mut pipeline, &loader, steps)?;
            let stem = cli.artifacts.join("text_encoder");
            pipeline.text_encoder.save(&stem, &pipeline.vocab_hash)?;
            manifest.add_artifact(&stem.with_extension("safetensors"));
            manifest.finish(&cli.artifacts)?;
            let (first, last) = report.window_means(50);
            println!("pretrain-text done: {steps} steps, loss {first:.4} -> {last:.4}");
        }
        Command::PretrainDamsm { steps } => {
            let dataset = load_dataset(&cfg)?;
            let top = cfg.model.max_resolution();
            let loader = split_loader(&cfg, &dataset, "train", vec![top])?;
            let mut pipeline = Pipeline::new(&cfg, &dataset, &device)?;
            let te_stem = cli.artifacts.join("text_encoder");
            if !te_stem.with_extension("json").exists() {
                return Err(Error::MissingPrerequisite {
                    stage: "pretrain-text".into(),
                    what: format!("{} not found", te_stem.with_extension("json").display()),
                });
            }
            let hash = pipeline.vocab_hash.clone();
            pipeline.text_encoder.load(&te_stem, &hash)?;
            let steps = steps.unwrap_or(cfg.damsm.phrase_steps);
            let mut manifest = RunManifest::begin("pretrain-damsm", &cfg, cfg.train.seed);
            let report = pretrain::pretrain_phrase_damsm(&mut pipeline, &loader, steps)?;
            let stem = cli.artifacts.join("graph_modules");
            pipeline.save_graph_checkpoint(&stem)?;
            manifest.add_artifact(&stem.with_extension("graph.safetensors"));
            manifest.finish(&cli.artifacts)?;
            let (first, last) = report.window_means(50);
            println!("pretrain-damsm done: {steps} steps, loss {first:.4} -> {last:.4}");
        }
        Command::Train { iterations, resume } => {
            let mut cfg = cfg;
            if let Some(it) = iterations {
                cfg.train.iterations = it;
            }
            let dataset = load_dataset(&cfg)?;
            let loader = split_loader(&cfg, &dataset, "train", stage_resolutions(&cfg))?;
            let mut pipeline = Pipeline::new(&cfg, &dataset, &device)?;
            pipeline.load_pretrained(&cli.artifacts)?;
            let mut manifest = RunManifest::begin("train", &cfg, cfg.train.seed);
            let mut trainer = Trainer::new(pipeline, loader, &cli.artifacts, resume)?;
            let report = trainer.run(&cli.artifacts)?;
            manifest.add_artifact(&cli.artifacts.join("train"));
            manifest.finish(&cli.artifacts)?;
            println!("training finished at step {}", report.final_step);
        }
        Command::Generate {
            objects,
            caption,
            gen_seed,
            stages,
            box_source,
            out,
            grid,
        } => {
            let mut cfg = cfg;
            if let Some(bs) = box_source {
                cfg.model.box_source = bs;
            }
            let dataset = load_dataset(&cfg)?;
            let mut pipeline = Pipeline::new(&cfg, &dataset, &device)?;
            pipeline.load_pretrained(&cli.artifacts)?;
            // The newest generator weights, when training ran.
            let marker = cli.artifacts.join("train").join("latest");
            if marker.exists() {
                let name = std::fs::read_to_string(&marker)?;
                let dir = cli.artifacts.join("train").join(name.trim());
                pipeline.gen_reg.load(&dir.join("gen.safetensors"))?;
                log::info!("loaded generator weights from {}", dir.display());
            } else {
                log::warn!("no training checkpoint found; generating with untrained weights");
            }

            let labels: Vec<usize> = objects
                .split(',')
                .map(|name| {
                    let name = name.trim();
                    dataset.categories.label_by_name(name).ok_or_else(|| {
                        Error::Data(format!(
                            "unknown object category `{name}`; known: {}",
                            dataset.categories.names.join(", ")
                        ))
                    })
                })
                .collect::<Result<_>>()?;
            let caption_ids = dataset.vocab.encode(&caption, cfg.data.max_caption_len);
            let n_stages = stages.unwrap_or(cfg.model.stages).min(cfg.model.stages);
            let outputs = pipeline.generate(&labels, &caption_ids, gen_seed, n_stages, None)?;

            std::fs::create_dir_all(&out)?;
            let mut manifest = RunManifest::begin("generate", &cfg, gen_seed);
            for (stage, img) in outputs.stage_images.iter().enumerate() {
                let res = cfg.model.stage_resolution(stage);
                let path = out.join(format!("sample_s{gen_seed}_stage{stage}_{res}.png"));
                save_image(img, &path)?;
                manifest.add_artifact(&path);
                println!("wrote {}", path.display());
            }
            if grid {
                let row = evaluation::GridRow {
                    caption: caption.clone(),
                    objects: objects.clone(),
                    stage_images: outputs
                        .stage_images
                        .iter()
                        .map(|t| t.narrow(0, 0, 1).and_then(|t| t.squeeze(0)))
                        .collect::<std::result::Result<_, _>>()?,
                };
                let grid_path = out.join(format!("grid_s{gen_seed}.png"));
                evaluation::emit_sample_grid(&[row], &grid_path, &cfg.model)?;
                manifest.add_artifact(&grid_path);
                println!("wrote {}", grid_path.display());
            }
            manifest.finish(&out)?;
        }
        Command::Evaluate {
            split,
            metric,
            n_images,
            checkpoint,
        } => {
            let dataset = load_dataset(&cfg)?;
            let top = cfg.model.max_resolution();
            let eval_loader = split_loader(&cfg, &dataset, &split, vec![top])?;
            let train_loader = split_loader(&cfg, &dataset, "train", vec![top])?;
            let mut pipeline = Pipeline::new(&cfg, &dataset, &device)?;
            pipeline.load_pretrained(&cli.artifacts)?;
            let ckpt_name = match checkpoint {
                Some(name) => name,
                None => {
                    let marker = cli.artifacts.join("train").join("latest");
                    if !marker.exists() {
                        return Err(Error::MissingPrerequisite {
                            stage: "train".into(),
                            what: "no training checkpoint to evaluate".into(),
                        });
                    }
                    std::fs::read_to_string(&marker)?.trim().to_string()
                }
            };
            let ckpt_dir = cli.artifacts.join("train").join(&ckpt_name);
            pipeline.gen_reg.load(&ckpt_dir.join("gen.safetensors"))?;

            let clf = evaluation::train_metric_classifier(
                &train_loader,
                dataset.categories.len(),
                300,
                cfg.train.seed,
            )?;
            let n = n_images.unwrap_or(cfg.eval.n_images);
            let report = evaluation::evaluate_split(
                &pipeline,
                &eval_loader,
                &clf,
                metric != "fid",
                metric != "is",
                n,
                cfg.eval.is_splits,
                cfg.train.seed,
            )?;
            let mut manifest = RunManifest::begin("evaluate", &cfg, cfg.train.seed);
            let report_path = cli
                .artifacts
                .join(format!("metrics_{split}_{ckpt_name}.json"));
            std::fs::create_dir_all(&cli.artifacts)?;
            std::fs::write(
                &report_path,
                serde_json::to_string_pretty(&report).expect("serializes"),
            )?;
            manifest.add_artifact(&report_path);
            manifest.finish(&cli.artifacts)?;
            if let Some((m, s)) = report.inception_score {
                println!("IS: {m:.3} +- {s:.3}");
            }
            if let Some(f) = report.fid {
                println!("FID: {f:.3}");
            }
            println!("report: {}", report_path.display());
        }
        Command::ConfigDump => {
            print!("{}", cfg.to_toml());
        }
    }
    Ok(())
}

fn save_image(batch: &candle_core::Tensor, path: &std::path::Path) -> Result<()> {
    let img = batch.narrow(0, 0, 1)?.squeeze(0)?.clamp(-1.0, 1.0)?;
    let (_c, h, w) = img.dims3()?;
    let data = img.to_vec3::<f32>()?;
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = [
                ((data[0][y][x] + 1.0) * 127.5) as u8,
                ((data[1][y][x] + 1.0) * 127.5) as u8,
                ((data[2][y][x] + 1.0) * 127.5) as u8,
            ];
            buf.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    buf.save(path)?;
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}: {e}", e.class());
            match e {
                Error::MissingPrerequisite { .. } => ExitCode::from(3),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
