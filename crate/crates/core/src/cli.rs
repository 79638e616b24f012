//! Command-line front end.
//!
//! [`dispatch`] parses argv, runs one verb and returns the process exit
//! code: 0 on success, 1 on a runtime failure (one diagnostic line on
//! stderr), 2 on a usage error. Every verb accepts `--seed` and `--config`;
//! the config is a training-config TOML whose image and texture dims drive
//! every verb that renders.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::bodymodel::{load_model, make_desk_body, save_model, BodyModelSpec};
use crate::checkpoint::Checkpoint;
use crate::dataio::{
    generate_synthetic_dataset, load_image, load_pose_sidecar, precompute_render_tensors, render_tensor_for,
    scan_dataset, BackgroundPool, DatasetIndex, ScannedDataset, Split, SplitSpec, SyntheticDatasetSpec,
    BACKGROUNDS_DIR, BODY_FILE, CACHE_DIR, MID_GRAY, REFERENCE_TEXTURE_FILE,
};
use crate::error::{Error, Result};
use crate::generator::Generator;
use crate::grid::{ImageTensor, RgbGrid, Texture};
use crate::idnet::{
    train_idnet, train_perceptual_on_index, IdNet, IdNetTrainConfig, IdNetVariant, PerceptualConfig, PerceptualNet,
    PerceptualTrainConfig,
};
use crate::losses::ReferenceTexture;
use crate::metrics::MaskSsimMode;
use crate::rendering::{apply, RenderTensor};
use crate::trainer::{
    evaluate, parse_variants, prepare_training_set, run_ablation, train, AblationVariant, EvalConfig, TrainConfig,
    TrainEnv,
};

#[derive(Debug, Parser)]
#[command(name = "retexture", version, about = "Person texture generation at desk scale")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    verb: Verb,
}

#[derive(Debug, Args)]
struct Common {
    /// Seed for every random stream; overrides the config's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Training-config TOML.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SplitArgs {
    /// Comma-separated identities forming the test split.
    #[arg(long, value_delimiter = ',')]
    test_ids: Option<Vec<u32>>,
    /// Without --test-ids, the numerically largest N identities are tested.
    #[arg(long, default_value_t = 2)]
    test_last: usize,
}

impl SplitArgs {
    fn spec(&self) -> SplitSpec {
        match &self.test_ids {
            Some(ids) => SplitSpec::TestIds(ids.clone()),
            None => SplitSpec::LastIds(self.test_last),
        }
    }
}

#[derive(Debug, Subcommand)]
enum Verb {
    /// Write the built-in desk body model as JSON.
    MakeBody {
        #[arg(long)]
        out: PathBuf,
        /// Mesh subdivision level.
        #[arg(long, default_value_t = 1)]
        resolution: usize,
    },
    /// Generate a synthetic multi-identity dataset with ground-truth textures.
    SynthData {
        #[arg(long, default_value_t = 8)]
        ids: usize,
        #[arg(long, default_value_t = 8)]
        views: usize,
        #[arg(long)]
        out: PathBuf,
        /// Body model JSON; the desk body when omitted.
        #[arg(long)]
        body: Option<PathBuf>,
    },
    /// Build render-tensor caches for every record of a dataset.
    Precompute {
        #[arg(long)]
        data: PathBuf,
        /// Defaults to <data>/body.json.
        #[arg(long)]
        body: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// Train the identity network on the training split.
    TrainIdnet {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// pcb or global.
        #[arg(long, default_value = "pcb")]
        variant: String,
        #[arg(long)]
        epochs: Option<usize>,
        #[command(flatten)]
        split: SplitArgs,
    },
    /// Train the texture generator; resumes from checkpoints in --out.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        idnet: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Loss variant; overrides the config.
        #[arg(long)]
        variant: Option<String>,
        /// Stop after this many iterations.
        #[arg(long)]
        iterations: Option<usize>,
        #[command(flatten)]
        aux: AuxNets,
        #[command(flatten)]
        split: SplitArgs,
    },
    /// Write the texture a checkpoint produces for one image.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render a texture, or a progress strip over checkpoints, in a pose.
    Render {
        /// Pose sidecar of the record.
        #[arg(long)]
        sidecar: PathBuf,
        /// Source image of the record; fixes the camera's pixel frame and
        /// opens the progress strip.
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Texture to render.
        #[arg(long, conflicts_with = "checkpoint", required_unless_present = "checkpoint")]
        texture: Option<PathBuf>,
        /// Generator checkpoints, in order; produces a strip.
        #[arg(long)]
        checkpoint: Vec<PathBuf>,
        /// Defaults to body.json next to the sidecar's directory.
        #[arg(long)]
        body: Option<PathBuf>,
    },
    /// Score a generator on the test split.
    Evaluate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        idnet: PathBuf,
        /// Average SSIM over windows inside the mask instead of masking
        /// then scoring the full frame.
        #[arg(long)]
        inside_mask: bool,
        /// Report path; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        split: SplitArgs,
    },
    /// Train and score every loss variant from the same initialization.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        idnet: PathBuf,
        /// Comma-separated variants; all when omitted.
        #[arg(long, value_delimiter = ',')]
        variants: Option<Vec<String>>,
        #[arg(long)]
        iterations: Option<usize>,
        /// Table path; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        aux: AuxNets,
        #[command(flatten)]
        split: SplitArgs,
    },
}

/// Networks only some variants need. Trained on the fly when absent.
#[derive(Debug, Args)]
struct AuxNets {
    /// Single-stripe identity network for no_pcb.
    #[arg(long)]
    idnet_global: Option<PathBuf>,
    /// Perceptual extractor for perceptual.
    #[arg(long)]
    perceptual: Option<PathBuf>,
}

/// Runs one command line. `argv[0]` is the program name.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.to_string().replace('\n', "; "));
            1
        }
    }
}

fn load_config(common: &Common) -> Result<TrainConfig> {
    let mut config = match &common.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    Ok(config)
}

fn run(cli: Cli) -> Result<()> {
    let config = load_config(&cli.common)?;
    match cli.verb {
        Verb::MakeBody { out, resolution } => {
            if resolution == 0 {
                return Err(Error::config("resolution must be at least 1"));
            }
            save_model(&make_desk_body(resolution), &out)?;
            println!("wrote {}", out.display());
        }
        Verb::SynthData { ids, views, out, body } => {
            let body = match body {
                Some(p) => load_model(&p)?,
                None => make_desk_body(1),
            };
            let spec = SyntheticDatasetSpec {
                image_dims: config.image_dims(),
                texture_dims: config.texture_dims(),
                ..SyntheticDatasetSpec::desk(ids, views, config.seed)
            };
            let ds = generate_synthetic_dataset(&spec, &body, &out)?;
            println!(
                "wrote {} images of {} identities to {}",
                ds.index.len(),
                ids,
                out.display()
            );
        }
        Verb::Precompute { data, body, workers } => {
            let body = load_body(&data, body.as_deref())?;
            let scanned = scan_dataset(&data, &SplitSpec::LastIds(0))?;
            report_skips(&scanned);
            let all = merged(&scanned);
            let report = precompute_render_tensors(&all, &body, config.render_dims(), &data.join(CACHE_DIR), workers)?;
            eprint!("{}", report.failure_report());
            println!(
                "built {} reused {} failed {}",
                report.built,
                report.reused,
                report.failures.len()
            );
        }
        Verb::TrainIdnet {
            data,
            out,
            variant,
            epochs,
            split,
        } => {
            let variant = match variant.as_str() {
                "pcb" => IdNetVariant::Pcb,
                "global" => IdNetVariant::Global,
                other => {
                    return Err(Error::config(format!(
                        "unknown idnet variant {:?}; expected pcb or global",
                        other
                    )))
                }
            };
            let scanned = scan_dataset(&data, &split.spec())?;
            report_skips(&scanned);
            let mut tc = IdNetTrainConfig {
                seed: config.seed,
                ..IdNetTrainConfig::default()
            };
            if let Some(e) = epochs {
                tc.epochs = e;
            }
            let trained = train_idnet(&scanned.train, variant, &tc)?;
            trained.net.to_checkpoint().save(&out)?;
            println!(
                "holdout top-1 {:.4} on {} images; wrote {}",
                trained.holdout_accuracy,
                trained.holdout_count,
                out.display()
            );
        }
        Verb::Train {
            data,
            idnet,
            out,
            variant,
            iterations,
            aux,
            split,
        } => {
            let mut config = config;
            if let Some(v) = variant {
                config.loss_variant = v.parse()?;
            }
            if iterations.is_some() {
                config.max_iterations = iterations;
            }
            config.validate()?;
            let scanned = scan_dataset(&data, &split.spec())?;
            report_skips(&scanned);
            let env = build_env(&data, &idnet, &aux, &config, &[config.loss_variant], &scanned.train)?;
            let set = prepare_training_set(&scanned.train, &env, &config)?;
            crate::io_util::create_dir(&out)?;
            crate::io_util::write_atomic(&out.join("config.toml"), config.to_toml().as_bytes())?;
            let outcome = train(&config, &set, &env, Some(&out))?;
            match outcome.history.last() {
                Some(last) => println!("{}", last.to_line()),
                None => println!("nothing to do at iteration {}", outcome.state.iteration),
            }
        }
        Verb::Generate { checkpoint, image, out } => {
            let generator = load_generator(&checkpoint)?;
            let (h, w, _) = generator.config().in_dims;
            generator.forward(&load_image(&image, (h, w))?)?.save_png(&out)?;
            println!("wrote {}", out.display());
        }
        Verb::Render {
            sidecar,
            image,
            out,
            texture,
            checkpoint,
            body,
        } => {
            let body = match body {
                Some(p) => load_model(&p)?,
                None => {
                    let root = sidecar.parent().and_then(Path::parent).unwrap_or(Path::new("."));
                    load_model(&root.join(BODY_FILE))?
                }
            };
            let sc = load_pose_sidecar(&sidecar)?;
            let dims = config.render_dims();
            let source = image_size(&image)?;
            let rt = render_tensor_for(&body, &sc, source, dims)?;
            match texture {
                Some(t) => {
                    let tex = Texture::load(&t)?;
                    let tex = if tex.dims() == dims.texture {
                        tex
                    } else {
                        tex.resized(dims.texture.0, dims.texture.1)
                    };
                    apply(&rt, &tex, &RgbGrid::filled(dims.image.0, dims.image.1, MID_GRAY))?.save_png(&out)?;
                }
                None => render_progress_strip(&checkpoint, &load_image(&image, dims.image)?, &rt, &out)?,
            }
            println!("wrote {}", out.display());
        }
        Verb::Evaluate {
            data,
            checkpoint,
            idnet,
            inside_mask,
            out,
            split,
        } => {
            let scanned = scan_dataset(&data, &split.spec())?;
            report_skips(&scanned);
            let generator = load_generator(&checkpoint)?;
            let idnet = load_idnet(&idnet)?;
            let eval = EvalConfig {
                mask_mode: if inside_mask {
                    MaskSsimMode::InsideMask
                } else {
                    MaskSsimMode::MaskThenFull
                },
                ..EvalConfig::default()
            };
            let report = evaluate(&generator, &scanned.test, &idnet, &eval)?;
            emit(out.as_deref(), &report.to_key_value())?;
        }
        Verb::Ablate {
            data,
            idnet,
            variants,
            iterations,
            out,
            aux,
            split,
        } => {
            let grid = match variants {
                Some(names) => parse_variants(&names)?,
                None => AblationVariant::ALL.to_vec(),
            };
            let mut config = config;
            if iterations.is_some() {
                config.max_iterations = iterations;
            }
            config.validate()?;
            let scanned = scan_dataset(&data, &split.spec())?;
            report_skips(&scanned);
            let env = build_env(&data, &idnet, &aux, &config, &grid, &scanned.train)?;
            let table = run_ablation(
                &grid,
                &config,
                &scanned.train,
                &scanned.test,
                &env,
                &EvalConfig::default(),
            )?;
            emit(out.as_deref(), &table.to_text())?;
        }
    }
    Ok(())
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => {
            crate::io_util::write_atomic(p, text.as_bytes())?;
            println!("wrote {}", p.display());
        }
        None => print!("{}", text),
    }
    Ok(())
}

fn report_skips(scanned: &ScannedDataset) {
    for e in &scanned.skipped {
        log::warn!("skipped {}: {}", e.path.display(), e.reason);
    }
}

fn merged(scanned: &ScannedDataset) -> DatasetIndex {
    let mut records = scanned.train.records.clone();
    records.extend(scanned.test.records.iter().cloned());
    DatasetIndex {
        records,
        split: Split::Train,
    }
}

fn load_body(data: &Path, body: Option<&Path>) -> Result<BodyModelSpec> {
    match body {
        Some(p) => load_model(p),
        None => load_model(&data.join(BODY_FILE)),
    }
}

fn image_size(path: &Path) -> Result<(usize, usize)> {
    let (w, h) = image::image_dimensions(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    Ok((h as usize, w as usize))
}

fn load_generator(path: &Path) -> Result<Generator> {
    Generator::from_checkpoint(&Checkpoint::load(path)?)
}

fn load_idnet(path: &Path) -> Result<IdNet> {
    IdNet::from_checkpoint(&Checkpoint::load(path)?)
}

fn build_env(
    data: &Path,
    idnet: &Path,
    aux: &AuxNets,
    config: &TrainConfig,
    variants: &[AblationVariant],
    train_index: &DatasetIndex,
) -> Result<TrainEnv> {
    let body = load_body(data, None)?;
    let (th, tw) = config.texture_dims();
    let reference = Texture::load(&data.join(REFERENCE_TEXTURE_FILE))?;
    let reference = if reference.dims() == (th, tw) {
        reference
    } else {
        reference.resized(th, tw)
    };
    let mask = body.face_hand_mask.resampled(th, tw);
    let idnet_global = if variants.iter().any(|v| v.idnet_variant() == IdNetVariant::Global) {
        Some(match &aux.idnet_global {
            Some(p) => load_idnet(p)?,
            None => {
                log::info!("training a single-stripe identity network");
                let tc = IdNetTrainConfig {
                    seed: config.seed,
                    ..IdNetTrainConfig::default()
                };
                train_idnet(train_index, IdNetVariant::Global, &tc)?.net
            }
        })
    } else {
        None
    };
    let perceptual = if variants.contains(&AblationVariant::Perceptual) {
        Some(match &aux.perceptual {
            Some(p) => PerceptualNet::from_checkpoint(&Checkpoint::load(p)?)?,
            None => {
                log::info!("training the perceptual extractor");
                let pc = PerceptualConfig {
                    input_dims: config.image_dims(),
                    seed: config.seed,
                    ..PerceptualConfig::desk()
                };
                let tc = PerceptualTrainConfig {
                    seed: config.seed,
                    ..PerceptualTrainConfig::default()
                };
                train_perceptual_on_index(train_index, pc, &tc)?.0
            }
        })
    } else {
        None
    };
    Ok(TrainEnv {
        reference: ReferenceTexture::new(reference, mask)?,
        idnet: load_idnet(idnet)?,
        idnet_global,
        perceptual,
        backgrounds: BackgroundPool::from_dir(&data.join(BACKGROUNDS_DIR), config.image_dims())?,
        body,
    })
}

/// Writes a horizontal strip: `image`, then the render of each
/// checkpoint's texture for that image through `rt`, over mid-gray and
/// quantized to 8 bits. Identical inputs give identical bytes.
pub fn render_progress_strip(
    checkpoints: &[PathBuf],
    image: &ImageTensor,
    rt: &RenderTensor,
    out: &Path,
) -> Result<()> {
    if checkpoints.is_empty() {
        return Err(Error::param("a progress strip needs at least one checkpoint"));
    }
    let (h, w) = rt.image_dims();
    if image.dims() != (h, w) {
        return Err(Error::param(format!(
            "image is {}x{}, render tensor is {}x{}",
            image.height(),
            image.width(),
            h,
            w
        )));
    }
    let background = RgbGrid::filled(h, w, MID_GRAY);
    let mut panels = vec![image.quantized()];
    for path in checkpoints {
        let generator = load_generator(path).map_err(|e| match e {
            Error::Io { .. } => e,
            other => Error::format(path.display().to_string(), other.to_string()),
        })?;
        let texture = generator.forward(image)?;
        panels.push(apply(rt, &texture, &background)?.quantized());
    }
    let strip = RgbGrid::from_fn(h, w * panels.len(), |r, c| panels[c / w].pixel(r, c % w));
    strip.save_png(out)
}
