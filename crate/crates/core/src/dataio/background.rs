use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::grid::ImageTensor;

pub const MID_GRAY: f64 = 0.5;

/// Random fixed-size crops from a set of images, or solid mid-gray when
/// none is usable.
#[derive(Debug, Clone)]
pub struct BackgroundPool {
    images: Vec<ImageTensor>,
    dims: (usize, usize),
}

impl BackgroundPool {
    /// Loads every readable image in `dir` at least `dims` in size.
    /// Smaller or unreadable files are skipped with a warning.
    pub fn from_dir(dir: &Path, dims: (usize, usize)) -> Result<Self> {
        let mut paths: Vec<_> = match std::fs::read_dir(dir) {
            Ok(rd) => rd
                .filter_map(|e| e.ok())
                .map(|e| e.path())
                .filter(|p| p.is_file())
                .collect(),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
            Err(e) => return Err(Error::io(dir, e)),
        };
        paths.sort();
        let mut images = Vec::new();
        for p in paths {
            match ImageTensor::load(&p) {
                Ok(img) if img.height() >= dims.0 && img.width() >= dims.1 => images.push(img),
                Ok(img) => log::warn!(
                    "background {} is {}x{}, smaller than {}x{}; skipped",
                    p.display(),
                    img.height(),
                    img.width(),
                    dims.0,
                    dims.1
                ),
                Err(e) => log::warn!("background {} skipped: {}", p.display(), e),
            }
        }
        Ok(Self::from_images(images, dims))
    }

    pub fn from_images(images: Vec<ImageTensor>, dims: (usize, usize)) -> Self {
        let images: Vec<_> = images
            .into_iter()
            .filter(|i| i.height() >= dims.0 && i.width() >= dims.1)
            .collect();
        if images.is_empty() {
            log::warn!("no usable background images; using solid mid-gray");
        }
        Self { images, dims }
    }

    /// A pool that always yields mid-gray.
    pub fn gray(dims: (usize, usize)) -> Self {
        Self {
            images: Vec::new(),
            dims,
        }
    }

    pub fn is_fallback(&self) -> bool {
        self.images.is_empty()
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Uniform image, then uniform top-left corner.
    pub fn sample(&self, rng: &mut impl Rng) -> ImageTensor {
        let (h, w) = self.dims;
        if self.images.is_empty() {
            return ImageTensor::filled(h, w, MID_GRAY);
        }
        let img = &self.images[rng.random_range(0..self.images.len())];
        let top = rng.random_range(0..=img.height() - h);
        let left = rng.random_range(0..=img.width() - w);
        img.crop(top, left, h, w).expect("crop fits by construction")
    }
}
