//! Texture-generator training: data preparation, the per-batch objective,
//! the epoch loop with checkpoints and resume, evaluation, and the
//! ablation harness.
//!
//! Every random draw is a pure function of `(seed, iteration, slot)`, so a
//! run restarted from any checkpoint replays the same trajectory.

mod ablation;
mod batch;

pub use ablation::{parse_variants, run_ablation, AblationRow, AblationTable, REFERENCE_SSIM};
pub use batch::{mine_triplets, sample_batch, Batch, BatchPlan, BatchShape, Triple};

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::bodymodel::BodyModelSpec;
use crate::checkpoint::Checkpoint;
use crate::dataio::{
    load_image, load_pose_sidecar, render_tensor_for, walking_poses, BackgroundPool, DatasetIndex, RenderDims, MID_GRAY,
};
use crate::error::{Error, Result};
use crate::generator::{Generator, GeneratorConfig};
use crate::grid::{ImageTensor, Texture, CHANNELS};
use crate::idnet::{FeatureStack, IdNet, IdNetVariant, PartFeatures, PerceptualNet};
use crate::losses::{self, LossKind, LossWeights, ReferenceTexture, TripletMargin};
use crate::metrics::{
    inception_score, mask_is, mask_ssim_with, ssim, Classifier, ImageMetrics, MaskSsimMode, MetricReport,
};
use crate::nn::{bind, collect_grads};
use crate::optim::{Adam, AdamConfig};
use crate::rendering::{apply, load_render_tensor, pose_mask, RenderTensor};
use crate::rng::derive_rng;

/// One cell of the ablation grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationVariant {
    Reid,
    PixelL1,
    Perceptual,
    Softmax,
    Triplet,
    DeepFeature,
    /// Re-ID loss through render tensors of random walking poses.
    NoPose,
    /// Re-ID loss through a single-stripe identity network.
    NoPcb,
}

impl AblationVariant {
    pub const ALL: [AblationVariant; 8] = [
        AblationVariant::Reid,
        AblationVariant::PixelL1,
        AblationVariant::Perceptual,
        AblationVariant::Softmax,
        AblationVariant::Triplet,
        AblationVariant::DeepFeature,
        AblationVariant::NoPose,
        AblationVariant::NoPcb,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationVariant::NoPose => "no_pose",
            AblationVariant::NoPcb => "no_pcb",
            other => other.loss_kind().name(),
        }
    }

    pub fn loss_kind(self) -> LossKind {
        match self {
            AblationVariant::Reid | AblationVariant::NoPose | AblationVariant::NoPcb => LossKind::Reid,
            AblationVariant::PixelL1 => LossKind::PixelL1,
            AblationVariant::Perceptual => LossKind::Perceptual,
            AblationVariant::Softmax => LossKind::Softmax,
            AblationVariant::Triplet => LossKind::Triplet,
            AblationVariant::DeepFeature => LossKind::DeepFeature,
        }
    }

    pub fn idnet_variant(self) -> IdNetVariant {
        if self == AblationVariant::NoPcb {
            IdNetVariant::Global
        } else {
            IdNetVariant::Pcb
        }
    }
}

impl FromStr for AblationVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|v| v.name() == s).ok_or_else(|| {
            let known: Vec<&str> = Self::ALL.iter().map(|v| v.name()).collect();
            Error::config(format!("unknown variant {:?}; expected one of {}", s, known.join(", ")))
        })
    }
}

impl std::fmt::Display for AblationVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub groups_per_batch: usize,
    pub images_per_group: usize,
    pub epochs: usize,
    /// Stops early after this many iterations in total.
    pub max_iterations: Option<usize>,
    pub loss_variant: AblationVariant,
    pub weights: LossWeights,
    /// Weight of the image term for every variant without the re-ID loss.
    pub lambda_image: f64,
    pub triplet_margin: f64,
    /// Draw a fresh background per item and iteration; otherwise one per
    /// record for the whole run.
    pub resample_backgrounds: bool,
    pub seed: u64,
    pub generator: GeneratorConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        Self {
            learning_rate: adam.learning_rate,
            beta1: adam.beta1,
            beta2: adam.beta2,
            epsilon: adam.epsilon,
            weight_decay: adam.weight_decay,
            batch_size: 16,
            groups_per_batch: 4,
            images_per_group: 4,
            epochs: 120,
            max_iterations: None,
            loss_variant: AblationVariant::Reid,
            weights: LossWeights::default(),
            lambda_image: 1.0,
            triplet_margin: 0.3,
            resample_backgrounds: true,
            seed: 0,
            generator: GeneratorConfig::desk(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.groups_per_batch == 0 || self.images_per_group == 0 {
            return Err(Error::config("groups_per_batch and images_per_group must be positive"));
        }
        if self.batch_size != self.groups_per_batch * self.images_per_group {
            return Err(Error::config(format!(
                "batch_size {} must equal groups_per_batch {} x images_per_group {}",
                self.batch_size, self.groups_per_batch, self.images_per_group
            )));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs must be at least 1"));
        }
        if !(self.lambda_image.is_finite() && self.lambda_image >= 0.0) {
            return Err(Error::config("lambda_image must be finite and non-negative"));
        }
        self.adam().validate()?;
        self.weights.validate()?;
        TripletMargin::new(self.triplet_margin)?;
        self.generator.validate()
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
            weight_decay: self.weight_decay,
        }
    }

    pub fn batch_shape(&self) -> BatchShape {
        BatchShape {
            groups: self.groups_per_batch,
            per_group: self.images_per_group,
        }
    }

    pub fn image_dims(&self) -> (usize, usize) {
        (self.generator.in_dims.0, self.generator.in_dims.1)
    }

    pub fn texture_dims(&self) -> (usize, usize) {
        (self.generator.out_dims.0, self.generator.out_dims.1)
    }

    pub fn render_dims(&self) -> RenderDims {
        RenderDims {
            image: self.image_dims(),
            texture: self.texture_dims(),
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is serializable")
    }
}

/// Frozen networks and fixed inputs shared by every run.
#[derive(Debug, Clone)]
pub struct TrainEnv {
    pub body: BodyModelSpec,
    pub reference: ReferenceTexture,
    /// Part-based identity network.
    pub idnet: IdNet,
    /// Single-stripe identity network, needed only by `no_pcb`.
    pub idnet_global: Option<IdNet>,
    /// Needed only by `perceptual`.
    pub perceptual: Option<PerceptualNet>,
    pub backgrounds: BackgroundPool,
}

impl TrainEnv {
    pub fn idnet_for(&self, variant: AblationVariant) -> Result<&IdNet> {
        match variant.idnet_variant() {
            IdNetVariant::Pcb => Ok(&self.idnet),
            IdNetVariant::Global => self
                .idnet_global
                .as_ref()
                .ok_or_else(|| Error::config(format!("variant {} needs a single-stripe identity network", variant))),
        }
    }

    fn perceptual_net(&self) -> Result<&PerceptualNet> {
        self.perceptual
            .as_ref()
            .ok_or_else(|| Error::config("variant perceptual needs a perceptual feature network"))
    }
}

/// A training record with everything the objective reads.
#[derive(Debug, Clone)]
pub struct PreparedRecord {
    pub image: ImageTensor,
    pub rt: Arc<RenderTensor>,
    pub identity: u32,
    reid: Option<FeatureStack>,
    parts: Option<PartFeatures>,
    taps: Option<Vec<Tensor>>,
}

#[derive(Debug, Clone)]
pub struct TrainingSet {
    pub index: DatasetIndex,
    pub items: Vec<PreparedRecord>,
    pub variant: AblationVariant,
}

const NO_POSE_STREAM: u64 = 30;
const BACKGROUND_STREAM: u64 = 20;
const FIXED_BACKGROUND_STREAM: u64 = 21;

fn missing_cache(path: &Path, image: &Path, why: &str) -> Error {
    Error::dataset(format!(
        "render-tensor cache {} for {} {}; run precompute first",
        path.display(),
        image.display(),
        why
    ))
}

/// Loads the cached render tensor of a record and checks its dims.
pub fn load_record_cache(index: &DatasetIndex, i: usize, dims: RenderDims) -> Result<RenderTensor> {
    let r = &index.records[i];
    if !r.cache_path.is_file() {
        return Err(missing_cache(&r.cache_path, &r.image_path, "is missing"));
    }
    let rt = load_render_tensor(&r.cache_path)
        .map_err(|e| missing_cache(&r.cache_path, &r.image_path, &format!("is unreadable ({})", e)))?;
    if rt.image_dims() != dims.image || rt.texture_dims() != dims.texture {
        return Err(missing_cache(
            &r.cache_path,
            &r.image_path,
            &format!(
                "has dims {:?}/{:?}, expected {:?}/{:?}",
                rt.image_dims(),
                rt.texture_dims(),
                dims.image,
                dims.texture
            ),
        ));
    }
    Ok(rt)
}

/// Render tensor of record `i` with its pose replaced by a random walking
/// phase and heading drawn from `(seed, i)`.
fn random_pose_tensor(
    index: &DatasetIndex,
    i: usize,
    body: &BodyModelSpec,
    dims: RenderDims,
    seed: u64,
) -> Result<RenderTensor> {
    let r = &index.records[i];
    let mut sidecar = load_pose_sidecar(&r.sidecar_path)?;
    let source = ImageTensor::load(&r.image_path)?.dims();
    let mut rng = derive_rng(seed, &[NO_POSE_STREAM, i as u64]);
    let poses = walking_poses(8);
    let mut theta = poses[rng.random_range(0..poses.len())].clone();
    theta.set_joint(
        0,
        [0.0, rng.random_range(-std::f64::consts::PI..std::f64::consts::PI), 0.0],
    );
    sidecar.theta = theta;
    render_tensor_for(body, &sidecar, source, dims)
}

/// Loads images, render tensors and the frozen input features the variant
/// needs.
pub fn prepare_training_set(index: &DatasetIndex, env: &TrainEnv, config: &TrainConfig) -> Result<TrainingSet> {
    config.validate()?;
    if index.is_empty() {
        return Err(Error::dataset("training index is empty"));
    }
    let variant = config.loss_variant;
    let dims = config.render_dims();
    let kind = variant.loss_kind();
    let idnet = env.idnet_for(variant)?;
    if matches!(
        kind,
        LossKind::Reid | LossKind::Softmax | LossKind::Triplet | LossKind::DeepFeature
    ) {
        idnet.check_input(&ImageTensor::zeros(dims.image.0, dims.image.1))?;
    }
    let perceptual = if kind == LossKind::Perceptual {
        let p = env.perceptual_net()?;
        p.check_input(&ImageTensor::zeros(dims.image.0, dims.image.1))?;
        Some(p)
    } else {
        None
    };
    if env.reference.texture.dims() != dims.texture {
        return Err(Error::config(format!(
            "reference texture is {:?} but the generator emits {:?}",
            env.reference.texture.dims(),
            dims.texture
        )));
    }
    let items = (0..index.len())
        .into_par_iter()
        .map(|i| {
            let r = &index.records[i];
            let image = load_image(&r.image_path, dims.image)?;
            let rt = if variant == AblationVariant::NoPose {
                random_pose_tensor(index, i, &env.body, dims, config.seed)?
            } else {
                load_record_cache(index, i, dims)?
            };
            let (reid, parts) = match kind {
                LossKind::Reid => (Some(idnet.extract_feature_stack(&image)?), None),
                LossKind::Softmax | LossKind::Triplet | LossKind::DeepFeature => {
                    (None, Some(idnet.extract_part_features(&image)?))
                }
                _ => (None, None),
            };
            let taps = match perceptual {
                Some(p) => Some(p.taps(&image)?),
                None => None,
            };
            Ok(PreparedRecord {
                image,
                rt: Arc::new(rt),
                identity: r.identity,
                reid,
                parts,
                taps,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TrainingSet {
        index: index.clone(),
        items,
        variant,
    })
}

/// Generator plus optimizer state.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub generator: Generator,
    pub adam: Adam,
    /// Completed iterations.
    pub iteration: usize,
}

impl TrainState {
    pub fn new(config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let generator = Generator::init(config.generator)?;
        let adam = Adam::new(config.adam(), generator.params());
        Ok(Self {
            generator,
            adam,
            iteration: 0,
        })
    }

    pub fn to_checkpoint(&self, config: &TrainConfig) -> Checkpoint {
        let mut ck = self
            .generator
            .to_checkpoint()
            .with_set("adam.m", self.adam.m.clone())
            .with_set("adam.v", self.adam.v.clone());
        ck.meta = serde_json::json!({
            "iteration": self.iteration,
            "adam_step": self.adam.step,
            "variant": config.loss_variant.name(),
            "seed": config.seed,
        });
        ck
    }

    /// Restores a training checkpoint; the optimizer settings come from
    /// `config`.
    pub fn from_checkpoint(ck: &Checkpoint, config: &TrainConfig) -> Result<Self> {
        let generator = Generator::from_checkpoint(ck)?;
        if *generator.config() != config.generator {
            return Err(Error::config(
                "checkpoint generator config differs from the training config",
            ));
        }
        let field = |k: &str| {
            ck.meta
                .get(k)
                .and_then(|v| v.as_u64())
                .ok_or_else(|| Error::format("meta", format!("training checkpoint has no {}", k)))
        };
        let adam = Adam {
            config: config.adam(),
            m: ck.set("adam.m")?.clone(),
            v: ck.set("adam.v")?.clone(),
            step: field("adam_step")?,
        };
        Ok(Self {
            generator,
            adam,
            iteration: field("iteration")? as usize,
        })
    }
}

/// Per-batch means of the loss terms. `image` and `face` are unweighted.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub total: f64,
    pub image: f64,
    pub face: f64,
}

impl StepLosses {
    pub fn is_finite(&self) -> bool {
        self.total.is_finite() && self.image.is_finite() && self.face.is_finite()
    }
}

fn background_for(env: &TrainEnv, config: &TrainConfig, iteration: usize, slot: usize, record: usize) -> ImageTensor {
    let mut rng = if config.resample_backgrounds {
        derive_rng(config.seed, &[BACKGROUND_STREAM, iteration as u64, slot as u64])
    } else {
        derive_rng(config.seed, &[FIXED_BACKGROUND_STREAM, record as u64])
    };
    env.backgrounds.sample(&mut rng)
}

struct ItemInputs<'a> {
    item: &'a PreparedRecord,
    background: Vec<f64>,
    triple: Option<(&'a Tensor, &'a Tensor)>,
}

struct Objective<'a> {
    env: &'a TrainEnv,
    config: &'a TrainConfig,
    idnet: &'a IdNet,
    reference_planar: Vec<f64>,
    mask_planar: Arc<Vec<f64>>,
    margin: TripletMargin,
    scale: f64,
}

impl Objective<'_> {
    /// Records the weighted, batch-scaled objective of one item. Returns
    /// `(total, image term, face term)`.
    fn record(&self, g: &mut Graph, generator: &Generator, vars: &[Var], inp: &ItemInputs) -> Result<(Var, Var, Var)> {
        let (h, w) = inp.item.image.dims();
        let x = g.constant(Tensor::new(vec![CHANNELS, h, w], inp.item.image.to_planar()));
        let t = generator.forward_graph(g, vars, x);
        let y = g.render(t, inp.item.rt.clone(), &inp.background);
        let kind = self.config.loss_variant.loss_kind();
        let image_term = match kind {
            LossKind::Reid => {
                let trace = self.idnet.trace_frozen(g, y);
                let fx = inp.item.reid.as_ref().expect("prepared for reid");
                losses::graph::layer_distance(g, &trace.stages, fx.layers())
            }
            LossKind::PixelL1 => losses::graph::pixel_l1(g, y, &inp.item.image.to_planar()),
            LossKind::Perceptual => {
                let p = self.env.perceptual_net()?;
                let taps = p.trace_frozen(g, y);
                losses::graph::layer_distance(g, &taps, inp.item.taps.as_ref().expect("prepared for perceptual"))
            }
            LossKind::Softmax => {
                let trace = self.idnet.trace_frozen(g, y);
                losses::graph::softmax(g, trace.gs, &inp.item.parts.as_ref().expect("prepared").gs)
            }
            LossKind::Triplet => {
                let trace = self.idnet.trace_frozen(g, y);
                let (p, n) = inp.triple.expect("mined");
                losses::graph::triplet(g, trace.g2, p, n, self.margin)
            }
            LossKind::DeepFeature => {
                let trace = self.idnet.trace_frozen(g, y);
                losses::graph::deep_feature(g, trace.g1, trace.g2, inp.item.parts.as_ref().expect("prepared"))
            }
        };
        let face_term = losses::graph::face(g, t, &self.reference_planar, self.mask_planar.clone());
        let w_image = if kind == LossKind::Reid {
            self.config.weights.lambda_reid
        } else {
            self.config.lambda_image
        };
        let a = g.scale(image_term, w_image * self.scale);
        let b = g.scale(face_term, self.config.weights.lambda_face * self.scale);
        Ok((g.add(a, b), image_term, face_term))
    }
}

/// Batch-mean objective and its gradient with respect to the generator
/// parameters, at `state.iteration`. Items run in parallel; their
/// contributions are summed in batch order.
pub fn batch_objective(
    state: &TrainState,
    set: &TrainingSet,
    env: &TrainEnv,
    config: &TrainConfig,
    batch: &Batch,
) -> Result<(StepLosses, Vec<Vec<f64>>)> {
    if batch.records.is_empty() {
        return Err(Error::param("empty batch"));
    }
    if let Some(&bad) = batch.records.iter().find(|&&r| r >= set.items.len()) {
        return Err(Error::param(format!(
            "batch references record {} of {}",
            bad,
            set.items.len()
        )));
    }
    let kind = config.loss_variant.loss_kind();
    let triples = if kind == LossKind::Triplet {
        let feats: Vec<Tensor> = batch
            .records
            .iter()
            .map(|&r| set.items[r].parts.as_ref().expect("prepared").g2.clone())
            .collect();
        let labels: Vec<u32> = batch.records.iter().map(|&r| set.items[r].identity).collect();
        Some(mine_triplets(&feats, &labels)?)
    } else {
        None
    };
    let (ref_planar, mask_planar) = env.reference.planar();
    let objective = Objective {
        env,
        config,
        idnet: env.idnet_for(config.loss_variant)?,
        reference_planar: ref_planar,
        mask_planar: Arc::new(mask_planar),
        margin: TripletMargin::new(config.triplet_margin)?,
        scale: 1.0 / batch.records.len() as f64,
    };
    let inputs: Vec<ItemInputs> = batch
        .records
        .iter()
        .enumerate()
        .map(|(slot, &r)| ItemInputs {
            item: &set.items[r],
            background: background_for(env, config, state.iteration, slot, r).to_planar(),
            triple: triples.as_ref().map(|t| {
                let (_, p, n) = t[slot];
                let g2 = |k: usize| &set.items[batch.records[k]].parts.as_ref().expect("prepared").g2;
                (g2(p), g2(n))
            }),
        })
        .collect();
    let params = state.generator.params();
    let parts: Vec<Result<([f64; 3], Vec<Vec<f64>>)>> = inputs
        .par_iter()
        .map(|inp| {
            let mut g = Graph::new();
            let vars = bind(&mut g, params, true);
            let (total, image, face) = objective.record(&mut g, &state.generator, &vars, inp)?;
            let grads = g.backward(total);
            Ok((
                [g.scalar(total), g.scalar(image), g.scalar(face)],
                collect_grads(&grads, &vars, params),
            ))
        })
        .collect();
    let mut sums = [0.0; 3];
    let mut acc: Vec<Vec<f64>> = (0..params.len()).map(|i| vec![0.0; params.get(i).len()]).collect();
    for part in parts {
        let (s, grads) = part?;
        for k in 0..3 {
            sums[k] += s[k];
        }
        for (a, g) in acc.iter_mut().zip(grads) {
            for (x, y) in a.iter_mut().zip(g) {
                *x += y;
            }
        }
    }
    let n = batch.records.len() as f64;
    Ok((
        StepLosses {
            total: sums[0],
            image: sums[1] / n,
            face: sums[2] / n,
        },
        acc,
    ))
}

/// One optimizer step on the generator. The identity network is only read.
pub fn train_step(
    state: &mut TrainState,
    set: &TrainingSet,
    env: &TrainEnv,
    config: &TrainConfig,
    batch: &Batch,
) -> Result<StepLosses> {
    let (losses, grads) = batch_objective(state, set, env, config, batch)?;
    state.adam.update(state.generator.params_mut(), &grads);
    state.iteration += 1;
    Ok(losses)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub iteration: usize,
    pub epoch: usize,
    pub losses: StepLosses,
}

impl LogRecord {
    pub fn to_line(&self) -> String {
        format!(
            "iter={} epoch={} total={:e} image={:e} face={:e}",
            self.iteration, self.epoch, self.losses.total, self.losses.image, self.losses.face
        )
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: TrainState,
    /// Iterations run by this call; empty when resuming a finished run.
    pub history: Vec<LogRecord>,
    pub checkpoints: Vec<PathBuf>,
}

pub const CHECKPOINTS_DIR: &str = "checkpoints";
pub const TRAIN_LOG: &str = "train.log";
pub const FINAL_CHECKPOINT: &str = "final.rtck";

pub fn epoch_checkpoint_name(epoch: usize) -> String {
    format!("epoch_{:04}.rtck", epoch)
}

/// Checkpoints under `out_dir`, ordered by iteration.
pub fn list_checkpoints(out_dir: &Path) -> Result<Vec<(usize, PathBuf)>> {
    let dir = out_dir.join(CHECKPOINTS_DIR);
    let rd = match std::fs::read_dir(&dir) {
        Ok(rd) => rd,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(Error::io(&dir, e)),
    };
    let mut out = Vec::new();
    for entry in rd.filter_map(|e| e.ok()) {
        let p = entry.path();
        if p.extension().is_some_and(|e| e == "rtck") {
            let ck = Checkpoint::load(&p)?;
            let it = ck.meta.get("iteration").and_then(|v| v.as_u64()).unwrap_or(0) as usize;
            out.push((it, p));
        }
    }
    out.sort();
    Ok(out)
}

fn rewrite_log(path: &Path, keep_through: usize) -> Result<()> {
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(()),
        Err(e) => return Err(Error::io(path, e)),
    };
    let kept: String = text
        .lines()
        .filter(|l| {
            l.strip_prefix("iter=")
                .and_then(|r| r.split_whitespace().next())
                .and_then(|n| n.parse::<usize>().ok())
                .is_some_and(|n| n <= keep_through)
        })
        .map(|l| format!("{}\n", l))
        .collect();
    crate::io_util::write_atomic(path, kept.as_bytes())
}

/// Runs `config.epochs` epochs (or `max_iterations`). With `out_dir`, a
/// checkpoint is written after every epoch and at the end, each iteration
/// is appended to the log, and an existing run there is resumed from its
/// latest checkpoint.
pub fn train(config: &TrainConfig, set: &TrainingSet, env: &TrainEnv, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    config.validate()?;
    if set.variant != config.loss_variant {
        return Err(Error::config(format!(
            "training set was prepared for {} but the config trains {}",
            set.variant, config.loss_variant
        )));
    }
    let plan = BatchPlan::new(&set.index, config.batch_shape(), config.seed)?;
    let per_epoch = plan.batches_per_epoch();
    let mut total = config.epochs * per_epoch;
    if let Some(m) = config.max_iterations {
        total = total.min(m);
    }

    let mut state = TrainState::new(config)?;
    let mut log_file = None;
    let mut checkpoints = Vec::new();
    if let Some(out) = out_dir {
        crate::io_util::create_dir(&out.join(CHECKPOINTS_DIR))?;
        if let Some((_, latest)) = list_checkpoints(out)?.pop() {
            state = TrainState::from_checkpoint(&Checkpoint::load(&latest)?, config)?;
            log::info!("resuming from {} at iteration {}", latest.display(), state.iteration);
        }
        let log_path = out.join(TRAIN_LOG);
        rewrite_log(&log_path, state.iteration)?;
        log_file = Some((
            std::fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(&log_path)
                .map_err(|e| Error::io(&log_path, e))?,
            log_path,
        ));
    }

    let mut history = Vec::new();
    let mut cached: Option<(usize, Vec<Batch>)> = None;
    while state.iteration < total {
        let epoch = state.iteration / per_epoch;
        if cached.as_ref().is_none_or(|(e, _)| *e != epoch) {
            cached = Some((epoch, plan.epoch(epoch)));
        }
        let batch = &cached.as_ref().unwrap().1[state.iteration % per_epoch];
        let losses = train_step(&mut state, set, env, config, batch)?;
        if !losses.is_finite() {
            return Err(Error::param(format!(
                "non-finite loss at iteration {}",
                state.iteration
            )));
        }
        let rec = LogRecord {
            iteration: state.iteration,
            epoch,
            losses,
        };
        if let Some((f, path)) = log_file.as_mut() {
            writeln!(f, "{}", rec.to_line()).map_err(|e| Error::io(path.as_path(), e))?;
        }
        history.push(rec);
        if let Some(out) = out_dir {
            let ck_dir = out.join(CHECKPOINTS_DIR);
            if state.iteration % per_epoch == 0 {
                let p = ck_dir.join(epoch_checkpoint_name(epoch + 1));
                state.to_checkpoint(config).save(&p)?;
                checkpoints.push(p);
            }
            if state.iteration == total {
                let p = ck_dir.join(FINAL_CHECKPOINT);
                state.to_checkpoint(config).save(&p)?;
                checkpoints.push(p);
            }
        }
    }
    Ok(TrainOutcome {
        state,
        history,
        checkpoints,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub is_splits: usize,
    pub mask_mode: MaskSsimMode,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            is_splits: 1,
            mask_mode: MaskSsimMode::MaskThenFull,
        }
    }
}

/// Renders generated textures for every test record over mid-gray,
/// quantized to 8 bits, and scores them against the inputs.
pub fn evaluate(
    generator: &Generator,
    index: &DatasetIndex,
    classifier: &(dyn Classifier + Sync),
    config: &EvalConfig,
) -> Result<MetricReport> {
    let (h, w, _) = generator.config().in_dims;
    let (th, tw, _) = generator.config().out_dims;
    let dims = RenderDims {
        image: (h, w),
        texture: (th, tw),
    };
    evaluate_textures(index, dims, &|_, image| generator.forward(image), classifier, config)
}

/// As [`evaluate`] with an arbitrary texture source, called with the record
/// number and its input image.
pub fn evaluate_textures(
    index: &DatasetIndex,
    dims: RenderDims,
    texture_for: &(dyn Fn(usize, &ImageTensor) -> Result<Texture> + Sync),
    classifier: &(dyn Classifier + Sync),
    config: &EvalConfig,
) -> Result<MetricReport> {
    if index.is_empty() {
        return Err(Error::dataset("test set is empty"));
    }
    if config.is_splits == 0 {
        return Err(Error::config("is_splits must be at least 1"));
    }
    let per: Vec<(ImageMetrics, ImageTensor, crate::grid::Mask)> = (0..index.len())
        .into_par_iter()
        .map(|i| {
            let rt = load_record_cache(index, i, dims)?;
            let x = index.load_image(i, dims.image)?;
            let t = texture_for(i, &x)?;
            let y = apply(&rt, &t, &ImageTensor::filled(dims.image.0, dims.image.1, MID_GRAY))?.quantized();
            let mask = pose_mask(&rt);
            let m = ImageMetrics {
                name: index.records[i].stem(),
                ssim: ssim(&x, &y)?,
                mask_ssim: mask_ssim_with(&x, &y, &mask, config.mask_mode)?,
            };
            Ok((m, y, mask))
        })
        .collect::<Result<_>>()?;
    let n = per.len();
    let renders: Vec<ImageTensor> = per.iter().map(|p| p.1.clone()).collect();
    let masks: Vec<crate::grid::Mask> = per.iter().map(|p| p.2.clone()).collect();
    let per_image: Vec<ImageMetrics> = per.into_iter().map(|p| p.0).collect();
    Ok(MetricReport {
        ssim: per_image.iter().map(|m| m.ssim).sum::<f64>() / n as f64,
        mask_ssim: per_image.iter().map(|m| m.mask_ssim).sum::<f64>() / n as f64,
        is_score: inception_score(&renders, classifier, config.is_splits)?,
        mask_is: mask_is(&renders, &masks, classifier, config.is_splits)?,
        n_images: n,
        per_image,
    })
}
