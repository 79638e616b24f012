//! U-Net texture generator.
//!
//! A stem convolution runs at input resolution, then a fixed pooling (or
//! nearest upsampling) adapter brings the map to texture resolution, so
//! non-square person crops feed square textures. Two constant coordinate
//! planes are appended there so the atlas layout can depend on position.
//! Each level holds two 3×3 convolutions; decoder levels upsample,
//! convolve, and concatenate the matching encoder output. A 1×1 convolution
//! and a sigmoid produce the texture.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamSet, Tensor, Var};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::grid::{ImageTensor, Texture, CHANNELS};
use crate::nn::{bind, Conv, LEAKY_SLOPE};

pub const GENERATOR_KIND: &str = "generator";
const COORD_PLANES: usize = 2;

/// Row and column coordinates in `[-1, 1]`, planar `2 × h × w`.
fn coordinate_planes(h: usize, w: usize) -> Tensor {
    let span = |i: usize, n: usize| {
        if n > 1 {
            2.0 * i as f64 / (n - 1) as f64 - 1.0
        } else {
            0.0
        }
    };
    let mut data = Vec::with_capacity(2 * h * w);
    for r in 0..h {
        data.extend(std::iter::repeat(span(r, h)).take(w));
    }
    for _ in 0..h {
        data.extend((0..w).map(|c| span(c, w)));
    }
    Tensor::new(vec![COORD_PLANES, h, w], data)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    /// `(height, width, channels)` of the input image.
    pub in_dims: (usize, usize, usize),
    /// `(height, width, channels)` of the produced texture.
    pub out_dims: (usize, usize, usize),
    pub depth: usize,
    pub base_channels: usize,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            in_dims: (128, 64, CHANNELS),
            out_dims: (64, 64, CHANNELS),
            depth: 4,
            base_channels: 32,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Resample {
    Pool(usize),
    Up(usize),
}

fn resample(from: usize, to: usize) -> Option<Resample> {
    if from >= to && from % to == 0 {
        Some(Resample::Pool(from / to))
    } else if to % from == 0 {
        Some(Resample::Up(to / from))
    } else {
        None
    }
}

impl GeneratorConfig {
    /// Small default for 64×32 crops and 32×32 textures.
    pub fn desk() -> Self {
        Self {
            in_dims: (64, 32, CHANNELS),
            out_dims: (32, 32, CHANNELS),
            depth: 2,
            base_channels: 8,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (ih, iw, ic) = self.in_dims;
        let (oh, ow, oc) = self.out_dims;
        if ic != CHANNELS || oc != CHANNELS {
            return Err(Error::config("generator input and output must have 3 channels"));
        }
        if self.depth == 0 || self.depth > 16 {
            return Err(Error::config(format!("generator depth {} out of range", self.depth)));
        }
        if self.base_channels < 4 {
            return Err(Error::config("generator base_channels must be at least 4"));
        }
        let unit = 1usize << self.depth;
        for (name, d) in [
            ("input height", ih),
            ("input width", iw),
            ("texture height", oh),
            ("texture width", ow),
        ] {
            if d == 0 || d % unit != 0 {
                return Err(Error::config(format!(
                    "{} {} is not divisible by 2^depth = {}",
                    name, d, unit
                )));
            }
        }
        if resample(ih, oh).is_none() || resample(iw, ow).is_none() {
            return Err(Error::config(format!(
                "no integer resampling from {}x{} to {}x{}",
                ih, iw, oh, ow
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Layers {
    stem: Conv,
    encoder: Vec<(Conv, Conv)>,
    middle: (Conv, Conv),
    up: Vec<Conv>,
    decoder: Vec<(Conv, Conv)>,
    head: Conv,
}

#[derive(Debug, Clone)]
pub struct Generator {
    config: GeneratorConfig,
    params: ParamSet,
    layers: Layers,
}

impl Generator {
    /// Fan-in scaled normal weights and zero biases, seeded by `config.seed`.
    pub fn init(config: GeneratorConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut p = ParamSet::new();
        let b = config.base_channels;
        let ch = |i: usize| b << i;
        let stem = Conv::new(&mut p, "stem", CHANNELS, b, 3, &mut rng);
        let mut encoder = Vec::new();
        for i in 0..config.depth {
            let cin = if i == 0 { b + COORD_PLANES } else { ch(i - 1) };
            encoder.push((
                Conv::new(&mut p, &format!("enc{}.a", i), cin, ch(i), 3, &mut rng),
                Conv::new(&mut p, &format!("enc{}.b", i), ch(i), ch(i), 3, &mut rng),
            ));
        }
        let d = config.depth;
        let middle = (
            Conv::new(&mut p, "mid.a", ch(d - 1), ch(d), 3, &mut rng),
            Conv::new(&mut p, "mid.b", ch(d), ch(d), 3, &mut rng),
        );
        let mut up = Vec::new();
        let mut decoder = Vec::new();
        for i in 0..d {
            up.push(Conv::new(&mut p, &format!("up{}", i), ch(i + 1), ch(i), 3, &mut rng));
            decoder.push((
                Conv::new(&mut p, &format!("dec{}.a", i), 2 * ch(i), ch(i), 3, &mut rng),
                Conv::new(&mut p, &format!("dec{}.b", i), ch(i), ch(i), 3, &mut rng),
            ));
        }
        let head = Conv::new(&mut p, "head", b, CHANNELS, 1, &mut rng);
        Ok(Self {
            config,
            params: p,
            layers: Layers {
                stem,
                encoder,
                middle,
                up,
                decoder,
                head,
            },
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Replaces the parameters; names and shapes must match this config.
    pub fn set_params(&mut self, params: ParamSet) -> Result<()> {
        let same = params.len() == self.params.len()
            && params
                .iter()
                .zip(self.params.iter())
                .all(|((n1, t1), (n2, t2))| n1 == n2 && t1.shape == t2.shape);
        if !same {
            return Err(Error::format(
                "params",
                "generator parameters do not match the configuration",
            ));
        }
        if !params.is_finite() {
            return Err(Error::format("params", "generator parameters are not finite"));
        }
        self.params = params;
        Ok(())
    }

    fn check_input(&self, image: &ImageTensor) -> Result<()> {
        let (h, w, _) = self.config.in_dims;
        if image.dims() != (h, w) {
            return Err(Error::param(format!(
                "generator expects {}x{} images, got {}x{}",
                h,
                w,
                image.height(),
                image.width()
            )));
        }
        Ok(())
    }

    /// Records the network on `g`. `vars` are the bound parameters and `x`
    /// a planar `3 × h × w` image; returns the planar texture.
    pub fn forward_graph(&self, g: &mut Graph, vars: &[Var], x: Var) -> Var {
        let c = &self.config;
        let l = &self.layers;
        let lrelu = |g: &mut Graph, v| g.leaky_relu(v, LEAKY_SLOPE);
        let mut h = l.stem.forward(g, vars, x);
        h = lrelu(g, h);
        let rh = resample(c.in_dims.0, c.out_dims.0).expect("validated");
        let rw = resample(c.in_dims.1, c.out_dims.1).expect("validated");
        let (ph, uh) = match rh {
            Resample::Pool(f) => (f, 1),
            Resample::Up(f) => (1, f),
        };
        let (pw, uw) = match rw {
            Resample::Pool(f) => (f, 1),
            Resample::Up(f) => (1, f),
        };
        if ph > 1 || pw > 1 {
            h = g.avg_pool(h, ph, pw);
        }
        if uh > 1 || uw > 1 {
            h = g.upsample(h, uh, uw);
        }
        let coords = g.constant(coordinate_planes(c.out_dims.0, c.out_dims.1));
        h = g.concat(h, coords);
        let mut skips = Vec::with_capacity(c.depth);
        for (a, b) in &l.encoder {
            h = a.forward(g, vars, h);
            h = lrelu(g, h);
            h = b.forward(g, vars, h);
            h = lrelu(g, h);
            skips.push(h);
            h = g.avg_pool(h, 2, 2);
        }
        h = l.middle.0.forward(g, vars, h);
        h = lrelu(g, h);
        h = l.middle.1.forward(g, vars, h);
        h = lrelu(g, h);
        for i in (0..c.depth).rev() {
            h = g.upsample(h, 2, 2);
            h = l.up[i].forward(g, vars, h);
            h = lrelu(g, h);
            h = g.concat(h, skips[i]);
            let (a, b) = &l.decoder[i];
            h = a.forward(g, vars, h);
            h = lrelu(g, h);
            h = b.forward(g, vars, h);
            h = lrelu(g, h);
        }
        let out = l.head.forward(g, vars, h);
        g.sigmoid(out)
    }

    /// Builds a graph for `image` with trainable parameter leaves. Returns
    /// the graph, the parameter vars, and the texture var.
    pub fn trace(&self, image: &ImageTensor) -> Result<(Graph, Vec<Var>, Var)> {
        self.check_input(image)?;
        let mut g = Graph::new();
        let vars = bind(&mut g, &self.params, true);
        let (h, w) = image.dims();
        let x = g.constant(Tensor::new(vec![CHANNELS, h, w], image.to_planar()));
        let t = self.forward_graph(&mut g, &vars, x);
        Ok((g, vars, t))
    }

    pub fn forward(&self, image: &ImageTensor) -> Result<Texture> {
        self.check_input(image)?;
        let mut g = Graph::new();
        let vars = bind(&mut g, &self.params, false);
        let (h, w) = image.dims();
        let x = g.constant(Tensor::new(vec![CHANNELS, h, w], image.to_planar()));
        let t = self.forward_graph(&mut g, &vars, x);
        let (th, tw, _) = self.config.out_dims;
        Texture::from_planar(th, tw, &g.value(t).data)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::new(GENERATOR_KIND, &self.config).with_set("params", self.params.clone())
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind(GENERATOR_KIND)?;
        let config: GeneratorConfig = ck.config_as()?;
        let mut gen = Self::init(config)?;
        gen.set_params(ck.set("params")?.clone())?;
        Ok(gen)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> GeneratorConfig {
        GeneratorConfig {
            in_dims: (8, 4, 3),
            out_dims: (4, 4, 3),
            depth: 2,
            base_channels: 4,
            seed: 5,
        }
    }

    fn image(seed: u64, h: usize, w: usize) -> ImageTensor {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageTensor::from_fn(h, w, |_, _| [rng.random(), rng.random(), rng.random()])
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let a = Generator::init(tiny()).unwrap();
        let b = Generator::init(tiny()).unwrap();
        assert_eq!(a.params(), b.params());
        let c = Generator::init(GeneratorConfig { seed: 6, ..tiny() }).unwrap();
        assert!(a.params().iter().zip(c.params().iter()).any(|(x, y)| x.1 != y.1));
        for (name, t) in a.params().iter() {
            if name.ends_with(".bias") {
                assert!(t.data.iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn too_deep_for_texture_is_config_error() {
        let cfg = GeneratorConfig {
            in_dims: (64, 32, 3),
            out_dims: (32, 32, 3),
            depth: 6,
            ..GeneratorConfig::desk()
        };
        assert!(matches!(Generator::init(cfg), Err(Error::Config(_))));
        let odd = GeneratorConfig {
            in_dims: (48, 32, 3),
            out_dims: (32, 32, 3),
            ..GeneratorConfig::desk()
        };
        assert!(matches!(odd.validate(), Err(Error::Config(_))));
        assert!(GeneratorConfig::default().validate().is_ok());
    }

    #[test]
    fn output_shape_range_and_sensitivity() {
        let gen = Generator::init(GeneratorConfig::desk()).unwrap();
        let a = gen.forward(&image(1, 64, 32)).unwrap();
        let b = gen.forward(&image(2, 64, 32)).unwrap();
        assert_eq!(a.dims(), (32, 32));
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(a.max_abs_diff(&b) > 0.0);
        assert_eq!(gen.forward(&image(1, 64, 32)).unwrap(), a);
        assert!(matches!(gen.forward(&image(1, 32, 32)), Err(Error::Parameter(_))));
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        let gen = Generator::init(tiny()).unwrap();
        let img = image(3, 8, 4);
        let (mut g, vars, t) = gen.trace(&img).unwrap();
        let s = g.sum(t);
        let grads = g.backward(s);
        let h = 1e-5;
        let objective = |p: &ParamSet| {
            let mut gen2 = gen.clone();
            gen2.set_params(p.clone()).unwrap();
            gen2.forward(&img).unwrap().data().iter().sum::<f64>()
        };
        for (i, &v) in vars.iter().enumerate() {
            let analytic = grads.get_or_zeros(v, gen.params().get(i).len());
            // Sample a few entries per tensor to keep the test fast.
            for k in (0..analytic.len()).step_by(analytic.len().div_ceil(3).max(1)) {
                let mut plus = gen.params().clone();
                plus.get_mut(i).data[k] += h;
                let mut minus = gen.params().clone();
                minus.get_mut(i).data[k] -= h;
                let numeric = (objective(&plus) - objective(&minus)) / (2.0 * h);
                let scale = numeric.abs().max(analytic[k].abs()).max(1e-4);
                assert!(
                    (numeric - analytic[k]).abs() / scale < 1e-2,
                    "{} [{}]: numeric {} analytic {}",
                    gen.params().names()[i],
                    k,
                    numeric,
                    analytic[k]
                );
            }
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let gen = Generator::init(tiny()).unwrap();
        let back = Generator::from_checkpoint(&Checkpoint::decode(&gen.to_checkpoint().encode()).unwrap()).unwrap();
        assert_eq!(back.params(), gen.params());
        assert_eq!(back.config(), gen.config());
    }
}
