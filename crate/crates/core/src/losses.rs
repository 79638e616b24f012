//! Scalar losses, each in two forms: a direct value on plain tensors, and a
//! graph form that records the same computation for differentiation with
//! respect to the rendered image or the texture. The non-differentiated
//! side of every graph form is a constant.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{log_sum_exp, softmax, Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::grid::{ImageTensor, Mask, Texture};
use crate::idnet::{FeatureStack, PartFeatures, PerceptualNet, PERCEPTUAL_TAPS};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_reid: f64,
    pub lambda_face: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_reid: 5e3,
            lambda_face: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda_reid", self.lambda_reid), ("lambda_face", self.lambda_face)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::config(format!(
                    "{} must be finite and non-negative, got {}",
                    name, v
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TripletMargin {
    pub alpha: f64,
}

impl TripletMargin {
    pub fn new(alpha: f64) -> Result<Self> {
        if !alpha.is_finite() || alpha < 0.0 {
            return Err(Error::config(format!(
                "triplet margin must be finite and non-negative, got {}",
                alpha
            )));
        }
        Ok(Self { alpha })
    }
}

/// Image-similarity term used by a training run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Reid,
    PixelL1,
    Perceptual,
    Softmax,
    Triplet,
    DeepFeature,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::Reid => "reid",
            LossKind::PixelL1 => "pixel_l1",
            LossKind::Perceptual => "perceptual",
            LossKind::Softmax => "softmax",
            LossKind::Triplet => "triplet",
            LossKind::DeepFeature => "deep_feature",
        }
    }
}

/// Reference texture `t_s` and the head/hand mask it is compared on.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceTexture {
    pub texture: Texture,
    pub mask: Mask,
}

impl ReferenceTexture {
    pub fn new(texture: Texture, mask: Mask) -> Result<Self> {
        if texture.dims() != mask.dims() {
            return Err(Error::param(format!(
                "reference texture is {:?} but its mask is {:?}",
                texture.dims(),
                mask.dims()
            )));
        }
        Ok(Self { texture, mask })
    }

    /// Planar texture values and planar mask weights.
    pub(crate) fn planar(&self) -> (Vec<f64>, Vec<f64>) {
        let m: Vec<f64> = self.mask.bits().iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        let mut planar_mask = Vec::with_capacity(3 * m.len());
        for _ in 0..3 {
            planar_mask.extend_from_slice(&m);
        }
        (self.texture.to_planar(), planar_mask)
    }
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::param(format!(
            "{} shapes differ: {:?} vs {:?}",
            what, a.shape, b.shape
        )));
    }
    Ok(())
}

fn l2_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn l1_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

/// `Σ_v ‖a_v − b_v‖₂` over matching layers.
pub fn layer_distance(a: &[Tensor], b: &[Tensor]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::param(format!("layer counts differ: {} vs {}", a.len(), b.len())));
    }
    let mut total = 0.0;
    for (x, y) in a.iter().zip(b) {
        same_shape(x, y, "layer")?;
        total += l2_diff(&x.data, &y.data);
    }
    Ok(total)
}

pub fn reid_loss(fx: &FeatureStack, fy: &FeatureStack) -> Result<f64> {
    layer_distance(fx.layers(), fy.layers())
}

fn check_dims(a: (usize, usize), b: (usize, usize), what: &str) -> Result<()> {
    if a != b {
        return Err(Error::param(format!("{} dims differ: {:?} vs {:?}", what, a, b)));
    }
    Ok(())
}

/// `‖M ⊙ (t − t_s)‖₁`.
pub fn face_loss(t: &Texture, reference: &ReferenceTexture) -> Result<f64> {
    check_dims(t.dims(), reference.texture.dims(), "texture")?;
    let mut total = 0.0;
    for (i, &m) in reference.mask.bits().iter().enumerate() {
        if m {
            for c in 0..3 {
                total += (t.data()[3 * i + c] - reference.texture.data()[3 * i + c]).abs();
            }
        }
    }
    Ok(total)
}

pub fn pixel_l1_loss(x: &ImageTensor, y: &ImageTensor) -> Result<f64> {
    check_dims(x.dims(), y.dims(), "image")?;
    Ok(l1_diff(x.data(), y.data()))
}

pub fn perceptual_loss(extractor: &PerceptualNet, x: &ImageTensor, y: &ImageTensor) -> Result<f64> {
    check_taps(extractor)?;
    layer_distance(&extractor.taps(x)?, &extractor.taps(y)?)
}

pub(crate) fn check_taps(extractor: &PerceptualNet) -> Result<()> {
    if extractor.tap_count() != PERCEPTUAL_TAPS {
        return Err(Error::config(format!(
            "perceptual extractor must expose {} taps, has {}",
            PERCEPTUAL_TAPS,
            extractor.tap_count()
        )));
    }
    Ok(())
}

/// Per part, cross-entropy of `softmax(gs_y)` against the soft target
/// `softmax(gs_x)`, summed over parts.
pub fn softmax_loss(gs_y: &Tensor, gs_x: &Tensor) -> Result<f64> {
    same_shape(gs_y, gs_x, "logit")?;
    if gs_y.shape.len() != 2 {
        return Err(Error::param("logits must be parts x classes"));
    }
    let c = gs_y.shape[1];
    let mut total = 0.0;
    for (ry, rx) in gs_y.data.chunks(c).zip(gs_x.data.chunks(c)) {
        let lse = log_sum_exp(ry);
        for (y, q) in ry.iter().zip(softmax(rx)) {
            total -= q * (y - lse);
        }
    }
    Ok(total)
}

/// `[‖y − p‖² − ‖y − n‖² + α]₊` on flattened part features.
pub fn triplet_hard_loss(g2_y: &Tensor, g2_p: &Tensor, g2_n: &Tensor, margin: TripletMargin) -> Result<f64> {
    same_shape(g2_y, g2_p, "anchor/positive")?;
    same_shape(g2_y, g2_n, "anchor/negative")?;
    let dp = l2_diff(&g2_y.data, &g2_p.data).powi(2);
    let dn = l2_diff(&g2_y.data, &g2_n.data).powi(2);
    Ok((dp - dn + margin.alpha).max(0.0))
}

/// `‖g1_y − g1_x‖₁ + ‖g2_y − g2_x‖₁`, the concatenated reading of the
/// summed-feature distance.
pub fn deep_feature_loss(pf_x: &PartFeatures, pf_y: &PartFeatures) -> Result<f64> {
    same_shape(&pf_x.g1, &pf_y.g1, "g1")?;
    same_shape(&pf_x.g2, &pf_y.g2, "g2")?;
    Ok(l1_diff(&pf_y.g1.data, &pf_x.g1.data) + l1_diff(&pf_y.g2.data, &pf_x.g2.data))
}

pub fn total_loss(reid: f64, face: f64, w: &LossWeights) -> f64 {
    w.lambda_reid * reid + w.lambda_face * face
}

/// Graph forms. Shapes are checked by the tape.
pub mod graph {
    use super::*;

    pub fn layer_distance(g: &mut Graph, y: &[Var], x: &[Tensor]) -> Var {
        assert_eq!(y.len(), x.len(), "layer counts differ");
        let mut total: Option<Var> = None;
        for (&v, t) in y.iter().zip(x) {
            let d = g.sub_const(v, &t.data);
            let n = g.l2_norm(d);
            total = Some(match total {
                Some(acc) => g.add(acc, n),
                None => n,
            });
        }
        total.expect("at least one layer")
    }

    /// `t` is a planar texture var.
    pub fn face(g: &mut Graph, t: Var, reference_planar: &[f64], mask_planar: Arc<Vec<f64>>) -> Var {
        let d = g.sub_const(t, reference_planar);
        let m = g.mul_const(d, mask_planar);
        g.l1_norm(m)
    }

    pub fn pixel_l1(g: &mut Graph, y: Var, x_planar: &[f64]) -> Var {
        let d = g.sub_const(y, x_planar);
        g.l1_norm(d)
    }

    pub fn softmax(g: &mut Graph, gs_y: Var, gs_x: &Tensor) -> Var {
        let c = gs_x.shape[1];
        let target: Vec<f64> = gs_x.data.chunks(c).flat_map(super::softmax).collect();
        g.soft_cross_entropy(gs_y, Arc::new(target))
    }

    pub fn triplet(g: &mut Graph, g2_y: Var, g2_p: &Tensor, g2_n: &Tensor, margin: TripletMargin) -> Var {
        let dp = g.sub_const(g2_y, &g2_p.data);
        let dp = g.sq_norm(dp);
        let dn = g.sub_const(g2_y, &g2_n.data);
        let dn = g.sq_norm(dn);
        let gap = g.sub(dp, dn);
        let shifted = g.add_scalar(gap, margin.alpha);
        g.relu(shifted)
    }

    pub fn deep_feature(g: &mut Graph, g1_y: Var, g2_y: Var, pf_x: &PartFeatures) -> Var {
        let a = g.sub_const(g1_y, &pf_x.g1.data);
        let a = g.l1_norm(a);
        let b = g.sub_const(g2_y, &pf_x.g2.data);
        let b = g.l1_norm(b);
        g.add(a, b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        Tensor::new(shape, data)
    }

    #[test]
    fn reid_three_four_five() {
        let zero = |n| t(vec![n], vec![0.0; n]);
        let fx = FeatureStack::new(vec![t(vec![4], vec![3.0, 4.0, 0.0, 0.0]), zero(1), zero(1), zero(1)]).unwrap();
        let fy = FeatureStack::new(vec![zero(4), zero(1), zero(1), zero(1)]).unwrap();
        assert_eq!(reid_loss(&fx, &fy).unwrap(), 5.0);
        assert_eq!(reid_loss(&fx, &fx).unwrap(), 0.0);
    }

    #[test]
    fn face_hand_sum() {
        let ts = Texture::zeros(2, 2);
        let mut tx = Texture::zeros(2, 2);
        tx.set_pixel(0, 0, [0.5, 0.0, 0.0]);
        tx.set_pixel(0, 1, [-0.5, 0.0, 0.0]);
        tx.set_pixel(1, 1, [1.0, 0.0, 0.0]);
        let mask = Mask::new(2, 2, vec![true, false, false, true]).unwrap();
        let r = ReferenceTexture::new(ts, mask).unwrap();
        assert!((face_loss(&tx, &r).unwrap() - 1.5).abs() < 1e-15);
    }

    #[test]
    fn softmax_analytic() {
        let target = t(vec![1, 2], vec![50.0, -50.0]);
        let uniform = t(vec![1, 2], vec![0.0, 0.0]);
        assert!((softmax_loss(&uniform, &target).unwrap() - 2f64.ln()).abs() < 1e-6);
    }

    #[test]
    fn triplet_direct() {
        let y = t(vec![1, 2], vec![0.0, 0.0]);
        let p = t(vec![1, 2], vec![2.0, 0.0]);
        let n = t(vec![1, 2], vec![0.0, 1.0]);
        assert!((triplet_hard_loss(&y, &p, &n, TripletMargin::new(0.3).unwrap()).unwrap() - 3.3).abs() < 1e-12);
    }

    #[test]
    fn total_with_default_weights() {
        assert!((total_loss(0.002, 1.0, &LossWeights::default()) - 11.0).abs() < 1e-12);
    }

    #[test]
    fn graph_forms_agree_with_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut rand_t = |shape: Vec<usize>| {
            let n = shape.iter().product();
            t(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
        };
        let (a, b) = (rand_t(vec![2, 3]), rand_t(vec![2, 3]));
        let (c, d) = (rand_t(vec![2, 3]), rand_t(vec![2, 3]));
        let mut g = Graph::new();
        let va = g.constant(a.clone());
        let s = graph::softmax(&mut g, va, &b);
        assert!((g.scalar(s) - softmax_loss(&a, &b).unwrap()).abs() < 1e-12);
        let tr = graph::triplet(&mut g, va, &b, &c, TripletMargin::new(0.5).unwrap());
        assert!(
            (g.scalar(tr) - triplet_hard_loss(&a, &b, &c, TripletMargin::new(0.5).unwrap()).unwrap()).abs() < 1e-12
        );
        let vd = g.constant(d.clone());
        let pf = PartFeatures {
            g1: b.clone(),
            g2: c.clone(),
            gs: c.clone(),
        };
        let pfy = PartFeatures {
            g1: a.clone(),
            g2: d.clone(),
            gs: d.clone(),
        };
        let df = graph::deep_feature(&mut g, va, vd, &pf);
        assert!((g.scalar(df) - deep_feature_loss(&pf, &pfy).unwrap()).abs() < 1e-12);
    }

    fn rand_tensor(seed: u64, shape: Vec<usize>) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        t(shape, (0..n).map(|_| rng.random_range(-2.0..2.0)).collect())
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(48))]

        #[test]
        fn distances_are_symmetric_and_non_negative(seed in 0u64..1_000_000) {
            let a = vec![rand_tensor(seed, vec![3, 4]), rand_tensor(seed + 1, vec![5])];
            let b = vec![rand_tensor(seed + 2, vec![3, 4]), rand_tensor(seed + 3, vec![5])];
            let d = layer_distance(&a, &b).unwrap();
            proptest::prop_assert!(d >= 0.0);
            proptest::prop_assert_eq!(d, layer_distance(&b, &a).unwrap());
            proptest::prop_assert_eq!(layer_distance(&a, &a).unwrap(), 0.0);
            let x = ImageTensor::from_vec(2, 3, rand_tensor(seed + 4, vec![18]).data).unwrap();
            let y = ImageTensor::from_vec(2, 3, rand_tensor(seed + 5, vec![18]).data).unwrap();
            proptest::prop_assert!(pixel_l1_loss(&x, &y).unwrap() >= 0.0);
            proptest::prop_assert_eq!(pixel_l1_loss(&x, &y).unwrap(), pixel_l1_loss(&y, &x).unwrap());
        }

        #[test]
        fn triplet_is_translation_invariant_and_hinged(seed in 0u64..1_000_000, shift in -5.0f64..5.0) {
            let (y, p, n) = (rand_tensor(seed, vec![2, 3]), rand_tensor(seed + 1, vec![2, 3]), rand_tensor(seed + 2, vec![2, 3]));
            let m = TripletMargin::new(0.3).unwrap();
            let moved = |v: &Tensor| t(v.shape.clone(), v.data.iter().map(|x| x + shift).collect());
            let base = triplet_hard_loss(&y, &p, &n, m).unwrap();
            proptest::prop_assert!(base >= 0.0);
            let shifted = triplet_hard_loss(&moved(&y), &moved(&p), &moved(&n), m).unwrap();
            proptest::prop_assert!((base - shifted).abs() < 1e-9);
            proptest::prop_assert!(softmax_loss(&y, &p).unwrap() >= 0.0);
        }

        #[test]
        fn total_loss_is_linear_in_weights(reid in 0.0f64..10.0, face in 0.0f64..10.0, k in 0.1f64..10.0) {
            let w = LossWeights::default();
            let scaled = LossWeights { lambda_reid: k * w.lambda_reid, lambda_face: k * w.lambda_face };
            let (a, b) = (total_loss(reid, face, &w), total_loss(reid, face, &scaled));
            proptest::prop_assert!((b - k * a).abs() < 1e-9 * (1.0 + b.abs()));
        }
    }
}
