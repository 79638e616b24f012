//! SSIM, mask-SSIM, Inception Score and mask-IS.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{ImageTensor, Mask};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// Produces a class posterior for an image.
pub trait Classifier {
    fn class_probabilities(&self, image: &ImageTensor) -> Result<Vec<f64>>;
}

impl<F> Classifier for F
where
    F: Fn(&ImageTensor) -> Vec<f64>,
{
    fn class_probabilities(&self, image: &ImageTensor) -> Result<Vec<f64>> {
        Ok(self(image))
    }
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-(i as f64 - r).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    let g: Vec<f64> = g.iter().map(|v| v / s).collect();
    let mut w = Vec::with_capacity(SSIM_WINDOW * SSIM_WINDOW);
    for a in &g {
        for b in &g {
            w.push(a * b);
        }
    }
    w
}

/// Local SSIM for every fully contained window, row-major over window
/// positions. The arithmetic is arranged so swapping `x` and `y` gives
/// bit-identical results.
fn ssim_map(x: &[f64], y: &[f64], h: usize, w: usize) -> Vec<f64> {
    let win = gaussian_window();
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let (oh, ow) = (h + 1 - SSIM_WINDOW, w + 1 - SSIM_WINDOW);
    let mut out = Vec::with_capacity(oh * ow);
    for r in 0..oh {
        for c in 0..ow {
            let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for i in 0..SSIM_WINDOW {
                for j in 0..SSIM_WINDOW {
                    let k = (r + i) * w + c + j;
                    let g = win[i * SSIM_WINDOW + j];
                    let (a, b) = (x[k], y[k]);
                    mx += g * a;
                    my += g * b;
                    sxx += g * (a * a);
                    syy += g * (b * b);
                    sxy += g * (a * b);
                }
            }
            let vx = sxx - mx * mx;
            let vy = syy - my * my;
            let cov = sxy - mx * my;
            let num = (2.0 * (mx * my) + c1) * (2.0 * cov + c2);
            let den = (mx * mx + my * my + c1) * (vx + vy + c2);
            out.push(num / den);
        }
    }
    out
}

fn check_pair(x: &ImageTensor, y: &ImageTensor) -> Result<()> {
    if x.dims() != y.dims() {
        return Err(Error::param(format!(
            "image dims differ: {:?} vs {:?}",
            x.dims(),
            y.dims()
        )));
    }
    if x.height() < SSIM_WINDOW || x.width() < SSIM_WINDOW {
        return Err(Error::param(format!(
            "images of {}x{} are smaller than the {}x{} window",
            x.height(),
            x.width(),
            SSIM_WINDOW,
            SSIM_WINDOW
        )));
    }
    Ok(())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Mean windowed SSIM on luma.
pub fn ssim(x: &ImageTensor, y: &ImageTensor) -> Result<f64> {
    check_pair(x, y)?;
    let (h, w) = x.dims();
    Ok(mean(&ssim_map(&x.luminance(), &y.luminance(), h, w)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskSsimMode {
    /// Zero both images outside the mask, then plain SSIM.
    #[default]
    MaskThenFull,
    /// Average the SSIM map over windows centred inside the mask.
    InsideMask,
}

pub fn mask_ssim(x: &ImageTensor, y: &ImageTensor, mask: &Mask) -> Result<f64> {
    mask_ssim_with(x, y, mask, MaskSsimMode::MaskThenFull)
}

/// With [`MaskSsimMode::InsideMask`], a mask containing no window centre
/// scores 1.
pub fn mask_ssim_with(x: &ImageTensor, y: &ImageTensor, mask: &Mask, mode: MaskSsimMode) -> Result<f64> {
    check_pair(x, y)?;
    if mask.dims() != x.dims() {
        return Err(Error::param(format!(
            "mask {:?} does not match images {:?}",
            mask.dims(),
            x.dims()
        )));
    }
    match mode {
        MaskSsimMode::MaskThenFull => ssim(&x.masked(mask)?, &y.masked(mask)?),
        MaskSsimMode::InsideMask => {
            let (h, w) = x.dims();
            let map = ssim_map(&x.luminance(), &y.luminance(), h, w);
            let ow = w + 1 - SSIM_WINDOW;
            let half = SSIM_WINDOW / 2;
            let inside: Vec<f64> = map
                .iter()
                .enumerate()
                .filter(|(i, _)| mask.get(i / ow + half, i % ow + half))
                .map(|(_, &v)| v)
                .collect();
            Ok(if inside.is_empty() { 1.0 } else { mean(&inside) })
        }
    }
}

/// Inception Score from precomputed posteriors.
pub fn inception_score_from_probs(probs: &[Vec<f64>], splits: usize) -> Result<f64> {
    if probs.is_empty() {
        return Err(Error::param("inception score needs at least one image"));
    }
    if splits == 0 || probs.len() % splits != 0 {
        return Err(Error::param(format!(
            "{} splits do not divide {} images",
            splits,
            probs.len()
        )));
    }
    let c = probs[0].len();
    if c == 0 || probs.iter().any(|p| p.len() != c) {
        return Err(Error::param("posteriors must share a non-zero class count"));
    }
    let n = probs.len() / splits;
    let mut total = 0.0;
    for chunk in probs.chunks(n) {
        // Mean shifted by the first row, so identical rows give a marginal
        // bit-equal to them and a score of exactly 1.
        let mut marginal = chunk[0].clone();
        for p in &chunk[1..] {
            for ((m, v), v0) in marginal.iter_mut().zip(p).zip(&chunk[0]) {
                *m += (v - v0) / n as f64;
            }
        }
        let mut kl = 0.0;
        for p in chunk {
            for (v, m) in p.iter().zip(&marginal) {
                if *v > 0.0 {
                    kl += v * (v / m).ln();
                }
            }
        }
        total += (kl / n as f64).exp();
    }
    Ok(total / splits as f64)
}

pub fn inception_score(images: &[ImageTensor], classifier: &dyn Classifier, splits: usize) -> Result<f64> {
    if images.is_empty() {
        return Err(Error::param("inception score needs at least one image"));
    }
    let probs = images
        .iter()
        .map(|img| classifier.class_probabilities(img))
        .collect::<Result<Vec<_>>>()?;
    inception_score_from_probs(&probs, splits)
}

pub fn mask_is(images: &[ImageTensor], masks: &[Mask], classifier: &dyn Classifier, splits: usize) -> Result<f64> {
    if images.len() != masks.len() {
        return Err(Error::param(format!(
            "{} images but {} masks",
            images.len(),
            masks.len()
        )));
    }
    let masked = images
        .iter()
        .zip(masks)
        .map(|(img, m)| img.masked(m))
        .collect::<Result<Vec<_>>>()?;
    inception_score(&masked, classifier, splits)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub name: String,
    pub ssim: f64,
    pub mask_ssim: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub ssim: f64,
    pub mask_ssim: f64,
    pub is_score: f64,
    pub mask_is: f64,
    pub n_images: usize,
    pub per_image: Vec<ImageMetrics>,
}

impl MetricReport {
    /// `key = value` lines: aggregates first, then `image.<name>.<metric>`.
    pub fn to_key_value(&self) -> String {
        let mut s = String::new();
        writeln!(s, "n_images = {}", self.n_images).unwrap();
        writeln!(s, "ssim = {}", self.ssim).unwrap();
        writeln!(s, "mask_ssim = {}", self.mask_ssim).unwrap();
        writeln!(s, "is_score = {}", self.is_score).unwrap();
        writeln!(s, "mask_is = {}", self.mask_is).unwrap();
        for m in &self.per_image {
            writeln!(s, "image.{}.ssim = {}", m.name, m.ssim).unwrap();
            writeln!(s, "image.{}.mask_ssim = {}", m.name, m.mask_ssim).unwrap();
        }
        s
    }
}
