use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{load_pose_sidecar, DatasetIndex, PoseSidecar};
use crate::bodymodel::{pose_mesh, BodyModelSpec};
use crate::error::{Error, Result};
use crate::rendering::{build_render_tensor, load_render_tensor, save_render_tensor, Camera, RenderTensor};

/// Image and texture resolution a render tensor is built for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderDims {
    pub image: (usize, usize),
    pub texture: (usize, usize),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PrecomputeReport {
    /// Records that succeeded, with cache paths pointing into the cache
    /// directory.
    pub index: DatasetIndex,
    pub built: usize,
    pub reused: usize,
    /// `(image path, reason)` per failed record.
    pub failures: Vec<(PathBuf, String)>,
}

impl PrecomputeReport {
    /// Line-oriented failure report.
    pub fn failure_report(&self) -> String {
        self.failures
            .iter()
            .map(|(p, r)| format!("{}: {}\n", p.display(), r))
            .collect()
    }
}

/// Rescales a sidecar camera from the source image size to `target`.
/// Only uniform rescaling is representable.
pub fn rescale_camera(camera: &Camera, source: (usize, usize), target: (usize, usize)) -> Result<Camera> {
    if source == target {
        return Ok(*camera);
    }
    let fy = target.0 as f64 / source.0 as f64;
    let fx = target.1 as f64 / source.1 as f64;
    if (fy - fx).abs() > 1e-9 * fy.max(fx) {
        return Err(Error::param(format!(
            "image {}x{} cannot be uniformly rescaled to {}x{}",
            source.0, source.1, target.0, target.1
        )));
    }
    // Pixel centres map as (p + 0.5) * f - 0.5.
    Camera::new(
        camera.scale * fx,
        [(camera.center[0] + 0.5) * fx - 0.5, (camera.center[1] + 0.5) * fy - 0.5],
    )
}

/// Render tensor of one sidecar at `dims`, for a sidecar whose camera is in
/// pixels of a `source`-sized image.
pub fn render_tensor_for(
    spec: &BodyModelSpec,
    sidecar: &PoseSidecar,
    source: (usize, usize),
    dims: RenderDims,
) -> Result<RenderTensor> {
    let camera = rescale_camera(&sidecar.camera, source, dims.image)?;
    let mesh = pose_mesh(spec, &sidecar.beta, &sidecar.theta, &sidecar.gamma)?;
    build_render_tensor(&mesh, &camera, dims.image, dims.texture)
}

fn image_size(path: &Path) -> Result<(usize, usize)> {
    let (w, h) = image::image_dimensions(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    Ok((h as usize, w as usize))
}

fn modified(path: &Path) -> Option<std::time::SystemTime> {
    std::fs::metadata(path).and_then(|m| m.modified()).ok()
}

fn cache_is_valid(cache: &Path, sidecar: &Path, dims: RenderDims) -> bool {
    match (modified(cache), modified(sidecar)) {
        (Some(c), Some(s)) if c >= s => {}
        _ => return false,
    }
    match load_render_tensor(cache) {
        Ok(rt) => rt.image_dims() == dims.image && rt.texture_dims() == dims.texture,
        Err(_) => false,
    }
}

enum Outcome {
    Built,
    Reused,
}

/// Builds one cache per record under `cache_dir`, reusing caches that are
/// newer than their sidecar and match `dims`. Fails only if every record
/// fails.
pub fn precompute_render_tensors(
    index: &DatasetIndex,
    spec: &BodyModelSpec,
    dims: RenderDims,
    cache_dir: &Path,
    workers: usize,
) -> Result<PrecomputeReport> {
    crate::io_util::create_dir(cache_dir)?;
    let mut updated = index.clone();
    for r in &mut updated.records {
        r.cache_path = cache_dir.join(format!("{}.rten", r.stem()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::config(format!("cannot start {} workers: {}", workers, e)))?;
    let outcomes: Vec<Result<Outcome>> = pool.install(|| {
        updated
            .records
            .par_iter()
            .map(|r| {
                if cache_is_valid(&r.cache_path, &r.sidecar_path, dims) {
                    return Ok(Outcome::Reused);
                }
                let sidecar = load_pose_sidecar(&r.sidecar_path)?;
                let rt = render_tensor_for(spec, &sidecar, image_size(&r.image_path)?, dims)?;
                save_render_tensor(&rt, &r.cache_path)?;
                Ok(Outcome::Built)
            })
            .collect()
    });
    let total = updated.records.len();
    let mut report = PrecomputeReport {
        index: DatasetIndex {
            records: Vec::new(),
            split: updated.split,
        },
        built: 0,
        reused: 0,
        failures: Vec::new(),
    };
    for (r, o) in updated.records.into_iter().zip(outcomes) {
        match o {
            Ok(Outcome::Built) => report.built += 1,
            Ok(Outcome::Reused) => report.reused += 1,
            Err(e) => {
                log::warn!("precompute failed for {}: {}", r.image_path.display(), e);
                report.failures.push((r.image_path, e.to_string()));
                continue;
            }
        }
        report.index.records.push(r);
    }
    if total > 0 && report.failures.len() == total {
        return Err(Error::dataset(format!(
            "precompute failed for all {} records; first: {}",
            report.failures.len(),
            report.failures[0].1
        )));
    }
    Ok(report)
}
