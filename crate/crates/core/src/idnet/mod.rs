//! Identity feature network: a four-stage convolutional backbone whose
//! stage outputs feed the re-identification loss, and a part head that
//! splits the last map into horizontal stripes.
//!
//! Training ends by rescaling every stage to unit per-channel RMS on the
//! training images. Predictions are unchanged; the re-ID loss then weighs
//! the four stages comparably instead of being dominated by the deepest.

mod backbone;
mod perceptual;

pub use perceptual::{
    orientation_label, train_perceptual, train_perceptual_on_index, PerceptualConfig, PerceptualNet,
    PerceptualTrainConfig, PERCEPTUAL_TAPS,
};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax, Graph, ParamSet, Tensor, Var};
use crate::checkpoint::Checkpoint;
use crate::dataio::DatasetIndex;
use crate::error::{Error, Result};
use crate::grid::{ImageTensor, CHANNELS};
use crate::metrics::Classifier;
use crate::nn::{bind, collect_grads, summed_gradients, PartLinear, LEAKY_SLOPE};
use crate::optim::{Adam, AdamConfig};
use backbone::{channel_rms, final_dims, Backbone};
use rayon::prelude::*;

pub const IDNET_KIND: &str = "idnet";
pub const NUM_STAGES: usize = 4;
pub const PCB_PARTS: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IdNetVariant {
    /// Six horizontal parts.
    Pcb,
    /// A single globally pooled part.
    Global,
}

impl IdNetVariant {
    pub fn parts(self) -> usize {
        match self {
            IdNetVariant::Pcb => PCB_PARTS,
            IdNetVariant::Global => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IdNetConfig {
    /// `(height, width)` of input images.
    pub input_dims: (usize, usize),
    pub widths: [usize; NUM_STAGES],
    /// Per-part projection width (`d2`).
    pub part_dim: usize,
    /// Identity labels, one per class, in class order.
    pub classes: Vec<u32>,
    pub variant: IdNetVariant,
    pub seed: u64,
}

impl IdNetConfig {
    pub fn desk(classes: Vec<u32>, variant: IdNetVariant) -> Self {
        Self {
            input_dims: (64, 32),
            widths: [8, 16, 32, 64],
            part_dim: 32,
            classes,
            variant,
            seed: 0,
        }
    }

    pub fn parts(&self) -> usize {
        self.variant.parts()
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.input_dims;
        let unit = 1 << (NUM_STAGES - 1);
        if h == 0 || w == 0 || h % unit != 0 || w % unit != 0 {
            return Err(Error::config(format!(
                "idnet input {}x{} is not divisible by {}",
                h, w, unit
            )));
        }
        if self.widths.iter().any(|&c| c == 0) || self.part_dim == 0 {
            return Err(Error::config("idnet widths must be positive"));
        }
        let (fh, _) = final_dims(self.input_dims, NUM_STAGES);
        if fh < self.parts() {
            return Err(Error::config(format!(
                "final feature map has {} rows, fewer than {} parts",
                fh,
                self.parts()
            )));
        }
        if self.classes.len() < 2 {
            return Err(Error::config("idnet needs at least two classes"));
        }
        Ok(())
    }
}

/// Activations at the end of each backbone stage, planar `c × h × w`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStack {
    activations: Vec<Tensor>,
}

impl FeatureStack {
    pub fn new(activations: Vec<Tensor>) -> Result<Self> {
        if activations.len() != NUM_STAGES {
            return Err(Error::param(format!(
                "a feature stack has {} layers, got {}",
                NUM_STAGES,
                activations.len()
            )));
        }
        Ok(Self { activations })
    }

    pub fn layers(&self) -> &[Tensor] {
        &self.activations
    }
}

/// Part-pooled backbone features `g1` (`p × d1`), projected features `g2`
/// (`p × d2`) and per-part logits `gs` (`p × C`).
#[derive(Debug, Clone, PartialEq)]
pub struct PartFeatures {
    pub g1: Tensor,
    pub g2: Tensor,
    pub gs: Tensor,
}

/// Graph handles for one traced image.
#[derive(Debug, Clone)]
pub struct IdNetTrace {
    pub stages: Vec<Var>,
    pub g1: Var,
    pub g2: Var,
    pub gs: Var,
}

#[derive(Debug, Clone)]
pub struct IdNet {
    config: IdNetConfig,
    params: ParamSet,
    backbone: Backbone,
    project: PartLinear,
    classify: PartLinear,
}

impl IdNet {
    pub fn init(config: IdNetConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamSet::new();
        let backbone = Backbone::new(&mut params, &config.widths, &mut rng);
        let p = config.parts();
        let d1 = config.widths[NUM_STAGES - 1];
        let project = PartLinear::new(&mut params, "part.project", p, d1, config.part_dim, &mut rng);
        let classify = PartLinear::new(
            &mut params,
            "part.classify",
            p,
            config.part_dim,
            config.classes.len(),
            &mut rng,
        );
        Ok(Self {
            config,
            params,
            backbone,
            project,
            classify,
        })
    }

    pub fn config(&self) -> &IdNetConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn variant(&self) -> IdNetVariant {
        self.config.variant
    }

    pub fn check_input(&self, image: &ImageTensor) -> Result<()> {
        if image.dims() != self.config.input_dims {
            return Err(Error::param(format!(
                "idnet expects {}x{} images, got {}x{}",
                self.config.input_dims.0,
                self.config.input_dims.1,
                image.height(),
                image.width()
            )));
        }
        Ok(())
    }

    /// Records the network on `g` for a planar image var.
    pub fn forward_graph(&self, g: &mut Graph, vars: &[Var], x: Var) -> IdNetTrace {
        let stages = self.backbone.forward(g, vars, x);
        let g1 = g.stripe_pool(*stages.last().unwrap(), self.config.parts());
        let z = self.project.forward(g, vars, g1);
        let g2 = g.leaky_relu(z, LEAKY_SLOPE);
        let gs = self.classify.forward(g, vars, g2);
        IdNetTrace { stages, g1, g2, gs }
    }

    /// Binds frozen parameters and an image constant onto `g`.
    pub fn trace_frozen(&self, g: &mut Graph, x: Var) -> IdNetTrace {
        let vars = bind(g, &self.params, false);
        self.forward_graph(g, &vars, x)
    }

    fn evaluate(&self, image: &ImageTensor) -> Result<(Graph, IdNetTrace)> {
        self.check_input(image)?;
        let mut g = Graph::new();
        let (h, w) = image.dims();
        let x = g.constant(Tensor::new(vec![CHANNELS, h, w], image.to_planar()));
        let t = self.trace_frozen(&mut g, x);
        Ok((g, t))
    }

    pub fn extract_feature_stack(&self, image: &ImageTensor) -> Result<FeatureStack> {
        let (g, t) = self.evaluate(image)?;
        FeatureStack::new(t.stages.iter().map(|&v| g.value(v).clone()).collect())
    }

    pub fn extract_part_features(&self, image: &ImageTensor) -> Result<PartFeatures> {
        let (g, t) = self.evaluate(image)?;
        Ok(PartFeatures {
            g1: g.value(t.g1).clone(),
            g2: g.value(t.g2).clone(),
            gs: g.value(t.gs).clone(),
        })
    }

    /// Both outputs from one pass.
    pub fn extract_all(&self, image: &ImageTensor) -> Result<(FeatureStack, PartFeatures)> {
        let (g, t) = self.evaluate(image)?;
        let stack = FeatureStack::new(t.stages.iter().map(|&v| g.value(v).clone()).collect())?;
        let parts = PartFeatures {
            g1: g.value(t.g1).clone(),
            g2: g.value(t.g2).clone(),
            gs: g.value(t.gs).clone(),
        };
        Ok((stack, parts))
    }

    /// Class index predicted by summing part log-probabilities.
    pub fn predict(&self, image: &ImageTensor) -> Result<usize> {
        let pf = self.extract_part_features(image)?;
        let c = self.config.classes.len();
        let mut score = vec![0.0; c];
        for row in pf.gs.data.chunks(c) {
            let lse = crate::autodiff::log_sum_exp(row);
            for (s, x) in score.iter_mut().zip(row) {
                *s += x - lse;
            }
        }
        Ok(argmax(&score))
    }

    /// Rescales stage activations to unit per-channel RMS over `images`
    /// without changing `g2` or `gs`. `g1` scales with the last stage.
    pub fn equalize_stage_scales(&mut self, images: &[ImageTensor]) -> Result<()> {
        if images.is_empty() {
            return Err(Error::dataset("stage equalization needs at least one image"));
        }
        let taps = images
            .par_iter()
            .map(|im| self.extract_feature_stack(im).map(|s| s.activations))
            .collect::<Result<Vec<_>>>()?;
        self.backbone
            .equalize(&mut self.params, &channel_rms(&taps), self.project.w);
        Ok(())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::new(IDNET_KIND, &self.config).with_set("params", self.params.clone())
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind(IDNET_KIND)?;
        let config: IdNetConfig = ck.config_as()?;
        let mut net = Self::init(config)?;
        let params = ck.set("params")?;
        let same = params.len() == net.params.len()
            && params
                .iter()
                .zip(net.params.iter())
                .all(|((a, x), (b, y))| a == b && x.shape == y.shape);
        if !same || !params.is_finite() {
            return Err(Error::format(
                "params",
                "idnet parameters do not match the configuration",
            ));
        }
        net.params = params.clone();
        Ok(net)
    }
}

impl Classifier for IdNet {
    /// Mean of the per-part class posteriors.
    fn class_probabilities(&self, image: &ImageTensor) -> Result<Vec<f64>> {
        let pf = self.extract_part_features(image)?;
        let c = self.config.classes.len();
        let mut acc = vec![0.0; c];
        let p = pf.gs.data.len() / c;
        for row in pf.gs.data.chunks(c) {
            for (a, q) in acc.iter_mut().zip(softmax(row)) {
                *a += q / p as f64;
            }
        }
        Ok(acc)
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IdNetTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Every `holdout_every`-th view of each identity is held out.
    pub holdout_every: usize,
    pub seed: u64,
}

impl Default for IdNetTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 12,
            batch_size: 16,
            adam: AdamConfig {
                learning_rate: 3e-3,
                ..AdamConfig::default()
            },
            holdout_every: 4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainedIdNet {
    pub net: IdNet,
    pub train_accuracy: f64,
    pub holdout_accuracy: f64,
    pub holdout_count: usize,
}

/// Loads every record of `dataset` and trains an identity classifier.
pub fn train_idnet(dataset: &DatasetIndex, variant: IdNetVariant, config: &IdNetTrainConfig) -> Result<TrainedIdNet> {
    let images = dataset.load_images((64, 32))?;
    let samples: Vec<(ImageTensor, u32)> = images
        .into_iter()
        .zip(dataset.records.iter().map(|r| r.identity))
        .collect();
    train_idnet_on(&samples, IdNetConfig::desk(Vec::new(), variant), config)
}

/// Trains on in-memory `(image, identity)` samples. `net_config.classes` is
/// replaced by the sorted identity set of `samples`.
pub fn train_idnet_on(
    samples: &[(ImageTensor, u32)],
    mut net_config: IdNetConfig,
    config: &IdNetTrainConfig,
) -> Result<TrainedIdNet> {
    let mut classes: Vec<u32> = samples.iter().map(|s| s.1).collect();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() < 2 {
        return Err(Error::dataset(format!(
            "identity training needs at least 2 identities, found {}",
            classes.len()
        )));
    }
    if config.batch_size == 0 || config.holdout_every < 2 {
        return Err(Error::config(
            "idnet batch_size must be positive and holdout_every at least 2",
        ));
    }
    config.adam.validate()?;
    net_config.classes = classes.clone();
    net_config.input_dims = samples[0].0.dims();
    let mut net = IdNet::init(net_config)?;
    let label = |id: u32| classes.binary_search(&id).unwrap();

    let mut seen = vec![0usize; classes.len()];
    let mut train_idx = Vec::new();
    let mut hold_idx = Vec::new();
    for (i, (_, id)) in samples.iter().enumerate() {
        let c = label(*id);
        if seen[c] % config.holdout_every == config.holdout_every - 1 {
            hold_idx.push(i);
        } else {
            train_idx.push(i);
        }
        seen[c] += 1;
    }

    let c = classes.len();
    let p = net.config.parts();
    let mut adam = Adam::new(config.adam, &net.params);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    for epoch in 0..config.epochs {
        let mut order = train_idx.clone();
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(config.batch_size) {
            let (loss, mut grads) = summed_gradients(batch, &net.params, |&i| {
                let (img, id) = &samples[i];
                let mut target = vec![0.0; p * c];
                for part in 0..p {
                    target[part * c + label(*id)] = 1.0;
                }
                let mut g = Graph::new();
                let vars = bind(&mut g, &net.params, true);
                let (h, w) = img.dims();
                let x = g.constant(Tensor::new(vec![CHANNELS, h, w], img.to_planar()));
                let t = net.forward_graph(&mut g, &vars, x);
                let l = g.soft_cross_entropy(t.gs, std::sync::Arc::new(target));
                let grads = g.backward(l);
                (g.scalar(l), collect_grads(&grads, &vars, &net.params))
            });
            let scale = 1.0 / batch.len() as f64;
            for gvec in grads.iter_mut() {
                gvec.iter_mut().for_each(|v| *v *= scale);
            }
            adam.update(&mut net.params, &grads);
            epoch_loss += loss;
        }
        log::info!(
            "idnet epoch {} loss {:.4}",
            epoch + 1,
            epoch_loss / train_idx.len().max(1) as f64
        );
    }

    let train_images: Vec<ImageTensor> = train_idx.iter().map(|&i| samples[i].0.clone()).collect();
    net.equalize_stage_scales(&train_images)?;

    let accuracy = |idx: &[usize]| -> Result<f64> {
        if idx.is_empty() {
            return Ok(0.0);
        }
        let mut correct = 0;
        for &i in idx {
            if net.predict(&samples[i].0)? == label(samples[i].1) {
                correct += 1;
            }
        }
        Ok(correct as f64 / idx.len() as f64)
    };
    let train_accuracy = accuracy(&train_idx)?;
    let holdout_accuracy = accuracy(&hold_idx)?;
    Ok(TrainedIdNet {
        net,
        train_accuracy,
        holdout_accuracy,
        holdout_count: hold_idx.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_image(seed: u64) -> ImageTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageTensor::from_fn(64, 32, |_, _| [rng.random(), rng.random(), rng.random()])
    }

    fn net(variant: IdNetVariant) -> IdNet {
        IdNet::init(IdNetConfig::desk(vec![1, 2, 3], variant)).unwrap()
    }

    #[test]
    fn stack_has_four_shrinking_stages() {
        let n = net(IdNetVariant::Pcb);
        let img = random_image(1);
        let s = n.extract_feature_stack(&img).unwrap();
        assert_eq!(s.layers().len(), 4);
        for pair in s.layers().windows(2) {
            assert!(pair[1].shape[1] < pair[0].shape[1] && pair[1].shape[2] < pair[0].shape[2]);
        }
        assert_eq!(n.extract_feature_stack(&img).unwrap(), s);
    }

    #[test]
    fn lower_half_change_reaches_stage_three() {
        let n = net(IdNetVariant::Pcb);
        let a = random_image(2);
        let mut b = a.clone();
        for r in 32..64 {
            for c in 0..32 {
                b.set_pixel(r, c, [0.5, 0.1, 0.9]);
            }
        }
        let (sa, sb) = (
            n.extract_feature_stack(&a).unwrap(),
            n.extract_feature_stack(&b).unwrap(),
        );
        assert_ne!(sa.layers()[2], sb.layers()[2]);
        // The first stage sees two rows of context, so its top rows are unchanged.
        let w = sa.layers()[0].shape[2];
        let top = 8 * w;
        for ch in 0..sa.layers()[0].shape[0] {
            let off = ch * 64 * w;
            assert_eq!(sa.layers()[0].data[off..off + top], sb.layers()[0].data[off..off + top]);
        }
    }

    #[test]
    fn part_counts_follow_variant() {
        let img = random_image(3);
        let pcb = net(IdNetVariant::Pcb).extract_part_features(&img).unwrap();
        assert_eq!(pcb.g1.shape, vec![6, 64]);
        assert_eq!(pcb.g2.shape, vec![6, 32]);
        assert_eq!(pcb.gs.shape, vec![6, 3]);
        let global = net(IdNetVariant::Global).extract_part_features(&img).unwrap();
        assert_eq!(global.g1.shape, vec![1, 64]);
    }

    #[test]
    fn constant_image_gives_identical_interior_rows() {
        // Zero padding perturbs the border rows, so compare the rows of a
        // stripe pool applied directly to a constant map.
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![2, 12, 4], vec![0.3; 96]));
        let p = g.stripe_pool(x, 6);
        let v = &g.value(p).data;
        for row in v.chunks(2) {
            assert_eq!(row, &v[0..2]);
        }
    }

    #[test]
    fn swapping_halves_swaps_stripe_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (c, h, w) = (3, 12, 4);
        let data: Vec<f64> = (0..c * h * w).map(|_| rng.random()).collect();
        let mut swapped = data.clone();
        for ch in 0..c {
            for r in 0..h {
                let src = (r + h / 2) % h;
                swapped[(ch * h + r) * w..(ch * h + r + 1) * w]
                    .copy_from_slice(&data[(ch * h + src) * w..(ch * h + src + 1) * w]);
            }
        }
        let pool = |d: Vec<f64>| {
            let mut g = Graph::new();
            let x = g.constant(Tensor::new(vec![c, h, w], d));
            let p = g.stripe_pool(x, 6);
            g.value(p).data.clone()
        };
        let (a, b) = (pool(data.clone()), pool(swapped));
        for k in 0..6 {
            assert_eq!(a[k * c..(k + 1) * c], b[((k + 3) % 6) * c..((k + 3) % 6 + 1) * c]);
        }
        // Stripe pooling equals pooling each stripe on its own.
        for k in 0..6 {
            for ch in 0..c {
                let rows = &data[(ch * h + 2 * k) * w..(ch * h + 2 * k + 2) * w];
                let mean = rows.iter().sum::<f64>() / rows.len() as f64;
                assert!((a[k * c + ch] - mean).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn too_short_map_is_config_error() {
        let mut cfg = IdNetConfig::desk(vec![1, 2], IdNetVariant::Pcb);
        cfg.input_dims = (32, 16);
        assert!(matches!(IdNet::init(cfg), Err(Error::Config(_))));
    }

    #[test]
    fn single_identity_is_dataset_error() {
        let samples = vec![(random_image(5), 3), (random_image(6), 3)];
        let r = train_idnet_on(
            &samples,
            IdNetConfig::desk(vec![], IdNetVariant::Pcb),
            &IdNetTrainConfig::default(),
        );
        assert!(matches!(r, Err(Error::Dataset(_))));
    }

    #[test]
    fn checkpoint_round_trip() {
        let n = net(IdNetVariant::Global);
        let back = IdNet::from_checkpoint(&Checkpoint::decode(&n.to_checkpoint().encode()).unwrap()).unwrap();
        assert_eq!(back.params(), n.params());
        assert_eq!(back.config(), n.config());
    }

    #[test]
    fn equalization_preserves_outputs_and_unit_rms() {
        let mut n = net(IdNetVariant::Pcb);
        let images: Vec<ImageTensor> = (10..14).map(random_image).collect();
        let before: Vec<PartFeatures> = images.iter().map(|im| n.extract_part_features(im).unwrap()).collect();
        n.equalize_stage_scales(&images).unwrap();
        for (im, b) in images.iter().zip(&before) {
            let a = n.extract_part_features(im).unwrap();
            for (x, y) in a.gs.data.iter().zip(&b.gs.data).chain(a.g2.data.iter().zip(&b.g2.data)) {
                assert!((x - y).abs() < 1e-9 * (1.0 + y.abs()), "{} vs {}", x, y);
            }
        }
        let taps: Vec<Vec<Tensor>> = images
            .iter()
            .map(|im| n.extract_feature_stack(im).unwrap().activations)
            .collect();
        for stage in channel_rms(&taps) {
            for r in stage {
                assert!(r < 1e-8 || (r - 1.0).abs() < 1e-9, "{}", r);
            }
        }
    }
}
