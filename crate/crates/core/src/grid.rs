//! Pixel and texel grids shared by the renderer, networks, and metrics.
//!
//! Colour grids are stored row-major, interleaved (`h × w × 3`). Networks
//! consume the planar (`3 × h × w`) layout, see [`RgbGrid::to_planar`].

use std::path::Path;

use crate::error::{Error, Result};

pub const CHANNELS: usize = 3;

/// An `h × w × 3` grid of reals, nominally in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbGrid {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

/// A texture map `t` in texel space.
pub type Texture = RgbGrid;
/// An image `x` or `y` in pixel space.
pub type ImageTensor = RgbGrid;

impl RgbGrid {
    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width * CHANNELS],
        }
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::filled(height, width, 0.0)
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * CHANNELS {
            return Err(Error::param(format!(
                "grid data has {} values, expected {}x{}x3",
                data.len(),
                height,
                width
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(height * width * CHANNELS);
        for r in 0..height {
            for c in 0..width {
                data.extend_from_slice(&f(r, c));
            }
        }
        Self { height, width, data }
    }

    /// Builds a grid from planar `3 × h × w` data.
    pub fn from_planar(height: usize, width: usize, planar: &[f64]) -> Result<Self> {
        let n = height * width;
        if planar.len() != n * CHANNELS {
            return Err(Error::param(format!(
                "planar data has {} values, expected 3x{}x{}",
                planar.len(),
                height,
                width
            )));
        }
        let mut data = vec![0.0; n * CHANNELS];
        for ch in 0..CHANNELS {
            for i in 0..n {
                data[i * CHANNELS + ch] = planar[ch * n + i];
            }
        }
        Ok(Self { height, width, data })
    }

    pub fn to_planar(&self) -> Vec<f64> {
        let n = self.height * self.width;
        let mut out = vec![0.0; n * CHANNELS];
        for i in 0..n {
            for ch in 0..CHANNELS {
                out[ch * n + i] = self.data[i * CHANNELS + ch];
            }
        }
        out
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn pixel(&self, row: usize, col: usize) -> [f64; 3] {
        let i = (row * self.width + col) * CHANNELS;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, row: usize, col: usize, rgb: [f64; 3]) {
        let i = (row * self.width + col) * CHANNELS;
        self.data[i..i + CHANNELS].copy_from_slice(&rgb);
    }

    /// Zeroes every pixel outside `mask`.
    pub fn masked(&self, mask: &Mask) -> Result<Self> {
        if mask.dims() != self.dims() {
            return Err(Error::param(format!(
                "mask {:?} does not match grid {:?}",
                mask.dims(),
                self.dims()
            )));
        }
        let mut out = self.clone();
        for (i, &keep) in mask.bits().iter().enumerate() {
            if !keep {
                out.data[i * CHANNELS..(i + 1) * CHANNELS].fill(0.0);
            }
        }
        Ok(out)
    }

    /// Rounds every value to the nearest 8-bit level, as a PNG round trip would.
    pub fn quantized(&self) -> Self {
        let data = self.data.iter().map(|&v| to_u8(v) as f64 / 255.0).collect();
        Self {
            height: self.height,
            width: self.width,
            data,
        }
    }

    /// ITU-R BT.601 luma, one value per pixel.
    pub fn luminance(&self) -> Vec<f64> {
        self.data
            .chunks_exact(CHANNELS)
            .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
            .collect()
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Self> {
        if top + height > self.height || left + width > self.width {
            return Err(Error::param(format!(
                "crop {}x{} at ({},{}) exceeds {}x{}",
                height, width, top, left, self.height, self.width
            )));
        }
        Ok(Self::from_fn(height, width, |r, c| self.pixel(top + r, left + c)))
    }

    /// Bilinear resize sampling at pixel centres, edges clamped.
    pub fn resized(&self, height: usize, width: usize) -> Self {
        if (height, width) == self.dims() {
            return self.clone();
        }
        let sy = self.height as f64 / height as f64;
        let sx = self.width as f64 / width as f64;
        Self::from_fn(height, width, |r, c| {
            let y = ((r as f64 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f64);
            let x = ((c as f64 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f64);
            let (y0, x0) = (y.floor() as usize, x.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(self.height - 1), (x0 + 1).min(self.width - 1));
            let (fy, fx) = (y - y0 as f64, x - x0 as f64);
            let mut out = [0.0; 3];
            let corners = [
                (y0, x0, (1.0 - fy) * (1.0 - fx)),
                (y0, x1, (1.0 - fy) * fx),
                (y1, x0, fy * (1.0 - fx)),
                (y1, x1, fy * fx),
            ];
            for (yy, xx, w) in corners {
                let p = self.pixel(yy, xx);
                for ch in 0..3 {
                    out[ch] += w * p[ch];
                }
            }
            out
        })
    }

    /// Reads any PNG or JPEG as 8-bit RGB.
    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|e| Error::Image {
                path: path.to_path_buf(),
                message: e.to_string(),
            })?
            .to_rgb8();
        let (w, h) = img.dimensions();
        let data = img.as_raw().iter().map(|&b| b as f64 / 255.0).collect();
        Ok(Self {
            height: h as usize,
            width: w as usize,
            data,
        })
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        let bytes: Vec<u8> = self.data.iter().map(|&v| to_u8(v)).collect();
        image::RgbImage::from_raw(self.width as u32, self.height as u32, bytes)
            .expect("buffer length matches dimensions")
    }

    /// Writes an 8-bit PNG; values are clamped to `[0, 1]` and rounded.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
        }
        self.to_rgb8().save(path).map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

pub(crate) fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// A binary `h × w` mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::param(format!(
                "mask has {} bits, expected {}x{}",
                bits.len(),
                height,
                width
            )));
        }
        Ok(Self { height, width, bits })
    }

    pub fn filled(height: usize, width: usize, value: bool) -> Self {
        Self {
            height,
            width,
            bits: vec![value; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                bits.push(f(r, c));
            }
        }
        Self { height, width, bits }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.width + col]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Nearest-neighbour resample, sampling at cell centres.
    pub fn resampled(&self, height: usize, width: usize) -> Self {
        if (height, width) == self.dims() {
            return self.clone();
        }
        Self::from_fn(height, width, |r, c| {
            let sr = ((r as f64 + 0.5) * self.height as f64 / height as f64) as usize;
            let sc = ((c as f64 + 0.5) * self.width as f64 / width as f64) as usize;
            self.get(sr.min(self.height - 1), sc.min(self.width - 1))
        })
    }
}
