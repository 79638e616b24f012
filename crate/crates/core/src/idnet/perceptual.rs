//! Generic five-tap feature extractor for the perceptual baseline. It is
//! trained to classify body orientation, a task blind to identity.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use rayon::prelude::*;

use super::backbone::{channel_rms, final_dims, Backbone};
use crate::autodiff::{Graph, ParamSet, Tensor, Var};
use crate::bodymodel::{mat_vec, rodrigues, PoseParams};
use crate::checkpoint::Checkpoint;
use crate::dataio::DatasetIndex;
use crate::error::{Error, Result};
use crate::grid::{ImageTensor, CHANNELS};
use crate::nn::{bind, collect_grads, summed_gradients, PartLinear};
use crate::optim::{Adam, AdamConfig};

pub const PERCEPTUAL_KIND: &str = "perceptual";
pub const PERCEPTUAL_TAPS: usize = 5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PerceptualConfig {
    pub input_dims: (usize, usize),
    pub widths: Vec<usize>,
    pub orientation_bins: usize,
    pub seed: u64,
}

impl PerceptualConfig {
    pub fn desk() -> Self {
        Self {
            input_dims: (64, 32),
            widths: vec![8, 16, 24, 32, 32],
            orientation_bins: 4,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.iter().any(|&w| w == 0) {
            return Err(Error::config("perceptual widths must be non-empty and positive"));
        }
        let unit = 1usize << (self.widths.len() - 1);
        let (h, w) = self.input_dims;
        if h == 0 || w == 0 || h % unit != 0 || w % unit != 0 {
            return Err(Error::config(format!(
                "perceptual input {}x{} is not divisible by {}",
                h, w, unit
            )));
        }
        if self.orientation_bins < 2 {
            return Err(Error::config("orientation_bins must be at least 2"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct PerceptualNet {
    config: PerceptualConfig,
    params: ParamSet,
    backbone: Backbone,
    head: PartLinear,
}

impl PerceptualNet {
    pub fn init(config: PerceptualConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamSet::new();
        let backbone = Backbone::new(&mut params, &config.widths, &mut rng);
        let last = *config.widths.last().unwrap();
        let head = PartLinear::new(&mut params, "head", 1, last, config.orientation_bins, &mut rng);
        Ok(Self {
            config,
            params,
            backbone,
            head,
        })
    }

    pub fn config(&self) -> &PerceptualConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn tap_count(&self) -> usize {
        self.config.widths.len()
    }

    pub fn check_input(&self, image: &ImageTensor) -> Result<()> {
        if image.dims() != self.config.input_dims {
            return Err(Error::param(format!(
                "perceptual net expects {}x{} images, got {}x{}",
                self.config.input_dims.0,
                self.config.input_dims.1,
                image.height(),
                image.width()
            )));
        }
        Ok(())
    }

    pub fn forward_graph(&self, g: &mut Graph, vars: &[Var], x: Var) -> (Vec<Var>, Var) {
        let taps = self.backbone.forward(g, vars, x);
        let pooled = g.stripe_pool(*taps.last().unwrap(), 1);
        let logits = self.head.forward(g, vars, pooled);
        (taps, logits)
    }

    pub fn trace_frozen(&self, g: &mut Graph, x: Var) -> Vec<Var> {
        let vars = bind(g, &self.params, false);
        self.forward_graph(g, &vars, x).0
    }

    pub fn taps(&self, image: &ImageTensor) -> Result<Vec<Tensor>> {
        self.check_input(image)?;
        let mut g = Graph::new();
        let (h, w) = image.dims();
        let x = g.constant(Tensor::new(vec![CHANNELS, h, w], image.to_planar()));
        let taps = self.trace_frozen(&mut g, x);
        Ok(taps.iter().map(|&v| g.value(v).clone()).collect())
    }

    pub fn predict(&self, image: &ImageTensor) -> Result<usize> {
        self.check_input(image)?;
        let mut g = Graph::new();
        let vars = bind(&mut g, &self.params, false);
        let (h, w) = image.dims();
        let x = g.constant(Tensor::new(vec![CHANNELS, h, w], image.to_planar()));
        let (_, logits) = self.forward_graph(&mut g, &vars, x);
        Ok(super::argmax(&g.value(logits).data))
    }

    /// Rescales taps to unit per-channel RMS over `images`; predictions are
    /// unchanged.
    pub fn equalize_tap_scales(&mut self, images: &[ImageTensor]) -> Result<()> {
        if images.is_empty() {
            return Err(Error::dataset("tap equalization needs at least one image"));
        }
        let taps = images.par_iter().map(|im| self.taps(im)).collect::<Result<Vec<_>>>()?;
        self.backbone
            .equalize(&mut self.params, &channel_rms(&taps), self.head.w);
        Ok(())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::new(PERCEPTUAL_KIND, &self.config).with_set("params", self.params.clone())
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind(PERCEPTUAL_KIND)?;
        let mut net = Self::init(ck.config_as()?)?;
        let params = ck.set("params")?;
        let same = params.len() == net.params.len()
            && params
                .iter()
                .zip(net.params.iter())
                .all(|((a, x), (b, y))| a == b && x.shape == y.shape);
        if !same || !params.is_finite() {
            return Err(Error::format(
                "params",
                "perceptual parameters do not match the configuration",
            ));
        }
        net.params = params.clone();
        Ok(net)
    }

    /// Spatial size of the last tap.
    pub fn final_dims(&self) -> (usize, usize) {
        final_dims(self.config.input_dims, self.config.widths.len())
    }
}

/// Bin of the body's facing direction about the vertical axis. Bin 0 is
/// centred on facing the camera.
pub fn orientation_label(theta: &PoseParams, bins: usize) -> usize {
    let r = rodrigues(theta.joint(0));
    let f = mat_vec(&r, &[0.0, 0.0, -1.0]);
    let yaw = f[0].atan2(-f[2]);
    let turn = (yaw / std::f64::consts::TAU + 0.5 / bins as f64).rem_euclid(1.0);
    ((turn * bins as f64) as usize).min(bins - 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PerceptualTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for PerceptualTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 4,
            batch_size: 16,
            adam: AdamConfig {
                learning_rate: 3e-3,
                ..AdamConfig::default()
            },
            seed: 0,
        }
    }
}

/// Trains on every record of `index`, labelled by the orientation bin of
/// its sidecar pose.
pub fn train_perceptual_on_index(
    index: &DatasetIndex,
    net_config: PerceptualConfig,
    config: &PerceptualTrainConfig,
) -> Result<(PerceptualNet, f64)> {
    let images = index.load_images(net_config.input_dims)?;
    let sidecars = index.load_sidecars()?;
    let bins = net_config.orientation_bins;
    let samples: Vec<(ImageTensor, usize)> = images
        .into_iter()
        .zip(&sidecars)
        .map(|(im, sc)| (im, orientation_label(&sc.theta, bins)))
        .collect();
    train_perceptual(&samples, net_config, config)
}

/// Trains the extractor on `(image, orientation bin)` samples and returns
/// it with its training accuracy.
pub fn train_perceptual(
    samples: &[(ImageTensor, usize)],
    net_config: PerceptualConfig,
    config: &PerceptualTrainConfig,
) -> Result<(PerceptualNet, f64)> {
    if samples.is_empty() {
        return Err(Error::dataset("perceptual training needs at least one image"));
    }
    if config.batch_size == 0 {
        return Err(Error::config("perceptual batch_size must be positive"));
    }
    config.adam.validate()?;
    let mut net = PerceptualNet::init(net_config)?;
    let bins = net.config.orientation_bins;
    if samples.iter().any(|s| s.1 >= bins) {
        return Err(Error::dataset("orientation label out of range"));
    }
    let mut adam = Adam::new(config.adam, &net.params);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            let (_, mut grads) = summed_gradients(batch, &net.params, |&i| {
                let (img, label) = &samples[i];
                let mut target = vec![0.0; bins];
                target[*label] = 1.0;
                let mut g = Graph::new();
                let vars = bind(&mut g, &net.params, true);
                let (h, w) = img.dims();
                let x = g.constant(Tensor::new(vec![CHANNELS, h, w], img.to_planar()));
                let (_, logits) = net.forward_graph(&mut g, &vars, x);
                let l = g.soft_cross_entropy(logits, Arc::new(target));
                let grads = g.backward(l);
                (g.scalar(l), collect_grads(&grads, &vars, &net.params))
            });
            let scale = 1.0 / batch.len() as f64;
            for gv in grads.iter_mut() {
                gv.iter_mut().for_each(|v| *v *= scale);
            }
            adam.update(&mut net.params, &grads);
        }
    }
    let images: Vec<ImageTensor> = samples.iter().map(|s| s.0.clone()).collect();
    net.equalize_tap_scales(&images)?;
    let mut correct = 0;
    for (img, label) in samples {
        if net.predict(img)? == *label {
            correct += 1;
        }
    }
    Ok((net, correct as f64 / samples.len() as f64))
}
