//! Rendering a fixed posed mesh as a sparse linear map from texture to image.
//!
//! For a fixed mesh and camera, every covered pixel is a convex combination
//! of at most four texels (barycentric UV interpolation followed by bilinear
//! texel sampling), so the renderer collapses into a `(h_y·w_y) × (h_t·w_t)`
//! sparse matrix shared across colour channels. The matrix is built once and
//! cached; training only multiplies by it and by its transpose.

mod cache;

pub use cache::{load_render_tensor, save_render_tensor, RTEN_MAGIC, RTEN_VERSION};

use serde::{Deserialize, Serialize};

use crate::bodymodel::BodyMesh;
use crate::error::{Error, Result};
use crate::grid::{Mask, RgbGrid, Texture, CHANNELS};

/// Weak-perspective camera: `pixel = scale · (x, y) + center`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub scale: f64,
    pub center: [f64; 2],
}

impl Camera {
    pub fn new(scale: f64, center: [f64; 2]) -> Result<Self> {
        let cam = Self { scale, center };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale.is_finite() && self.scale > 0.0) {
            return Err(Error::format("camera.scale", "must be finite and positive"));
        }
        if self.center.iter().any(|c| !c.is_finite()) {
            return Err(Error::format("camera.center", "must be finite"));
        }
        Ok(())
    }
}

/// Projects every vertex to `(pixel x, pixel y, depth)`.
pub fn project(camera: &Camera, mesh: &BodyMesh) -> Vec<[f64; 3]> {
    mesh.vertices
        .iter()
        .map(|v| {
            [
                camera.scale * v[0] + camera.center[0],
                camera.scale * v[1] + camera.center[1],
                v[2],
            ]
        })
        .collect()
}

/// One nonzero of the render matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderEntry {
    pub pixel: u32,
    pub texel: u32,
    pub weight: f32,
}

/// Sparse texture-to-image operator plus the pixels it covers.
///
/// Entries are sorted by `(pixel, texel)`; every covered pixel's weights are
/// non-negative and sum to one.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderTensor {
    image_dims: (usize, usize),
    texture_dims: (usize, usize),
    entries: Vec<RenderEntry>,
    coverage: Mask,
    /// `row_start[k]..row_start[k + 1]` indexes the entries of the k-th
    /// covered pixel, in pixel order.
    row_start: Vec<usize>,
}

const WEIGHT_SUM_TOL: f64 = 1e-6;

impl RenderTensor {
    /// Builds and validates a tensor from raw parts.
    pub fn from_parts(
        image_dims: (usize, usize),
        texture_dims: (usize, usize),
        entries: Vec<RenderEntry>,
        coverage: Mask,
    ) -> Result<Self> {
        if coverage.dims() != image_dims {
            return Err(Error::format(
                "coverage",
                format!("mask {:?} does not match image {:?}", coverage.dims(), image_dims),
            ));
        }
        let n_pixels = image_dims.0 * image_dims.1;
        let n_texels = texture_dims.0 * texture_dims.1;
        if n_pixels > u32::MAX as usize || n_texels > u32::MAX as usize {
            return Err(Error::format("dims", "too large for 32-bit indices"));
        }
        let mut row_start = Vec::new();
        let mut covered = vec![false; n_pixels];
        let mut i = 0;
        while i < entries.len() {
            let pixel = entries[i].pixel as usize;
            if pixel >= n_pixels {
                return Err(Error::format("entries", format!("pixel index {} out of range", pixel)));
            }
            let start = i;
            let mut sum = 0.0f64;
            while i < entries.len() && entries[i].pixel as usize == pixel {
                let e = entries[i];
                if e.texel as usize >= n_texels {
                    return Err(Error::format(
                        "entries",
                        format!("texel index {} out of range", e.texel),
                    ));
                }
                if !(e.weight >= 0.0) || !e.weight.is_finite() {
                    return Err(Error::format(
                        "entries",
                        format!("pixel {} has a negative or non-finite weight", pixel),
                    ));
                }
                if i > start && entries[i - 1].texel >= e.texel {
                    return Err(Error::format("entries", "not sorted by (pixel, texel)"));
                }
                sum += e.weight as f64;
                i += 1;
            }
            if let Some(prev) = start.checked_sub(1) {
                if entries[prev].pixel as usize >= pixel {
                    return Err(Error::format("entries", "not sorted by (pixel, texel)"));
                }
            }
            if (sum - 1.0).abs() > WEIGHT_SUM_TOL {
                return Err(Error::format(
                    "entries",
                    format!("weights of pixel {} sum to {}, expected 1", pixel, sum),
                ));
            }
            covered[pixel] = true;
            row_start.push(start);
        }
        row_start.push(entries.len());
        if covered.as_slice() != coverage.bits() {
            return Err(Error::format("coverage", "does not match the pixels that have entries"));
        }
        Ok(Self {
            image_dims,
            texture_dims,
            entries,
            coverage,
            row_start,
        })
    }

    /// An operator that covers nothing.
    pub fn empty(image_dims: (usize, usize), texture_dims: (usize, usize)) -> Self {
        Self {
            image_dims,
            texture_dims,
            entries: Vec::new(),
            coverage: Mask::filled(image_dims.0, image_dims.1, false),
            row_start: vec![0],
        }
    }

    pub fn image_dims(&self) -> (usize, usize) {
        self.image_dims
    }

    pub fn texture_dims(&self) -> (usize, usize) {
        self.texture_dims
    }

    pub fn entries(&self) -> &[RenderEntry] {
        &self.entries
    }

    pub fn coverage(&self) -> &Mask {
        &self.coverage
    }

    fn pixel_rows(&self) -> impl Iterator<Item = (usize, &[RenderEntry])> + '_ {
        self.row_start.windows(2).map(move |w| {
            let row = &self.entries[w[0]..w[1]];
            (row[0].pixel as usize, row)
        })
    }

    /// Texels touched by at least one covered pixel with positive weight.
    pub fn visible_texels(&self) -> Mask {
        let (h, w) = self.texture_dims;
        let mut bits = vec![false; h * w];
        for e in &self.entries {
            if e.weight > 0.0 {
                bits[e.texel as usize] = true;
            }
        }
        Mask::new(h, w, bits).expect("length matches texture dims")
    }

    fn check_texture(&self, dims: (usize, usize)) -> Result<()> {
        if dims != self.texture_dims {
            return Err(Error::param(format!(
                "texture is {:?}, render tensor expects {:?}",
                dims, self.texture_dims
            )));
        }
        Ok(())
    }

    fn check_image(&self, dims: (usize, usize)) -> Result<()> {
        if dims != self.image_dims {
            return Err(Error::param(format!(
                "image is {:?}, render tensor expects {:?}",
                dims, self.image_dims
            )));
        }
        Ok(())
    }

    /// Planar (`3 × h × w`) forward product; uncovered pixels keep `out`'s
    /// existing values.
    pub(crate) fn apply_planar(&self, texture: &[f64], out: &mut [f64]) {
        let n_tex = self.texture_dims.0 * self.texture_dims.1;
        let n_pix = self.image_dims.0 * self.image_dims.1;
        for (pixel, row) in self.pixel_rows() {
            for ch in 0..CHANNELS {
                let tex = &texture[ch * n_tex..(ch + 1) * n_tex];
                let mut acc = 0.0;
                for e in row {
                    acc += e.weight as f64 * tex[e.texel as usize];
                }
                out[ch * n_pix + pixel] = acc;
            }
        }
    }

    /// Planar transpose product, accumulated into `out`.
    pub(crate) fn transpose_planar(&self, cotangent: &[f64], out: &mut [f64]) {
        let n_tex = self.texture_dims.0 * self.texture_dims.1;
        let n_pix = self.image_dims.0 * self.image_dims.1;
        for (pixel, row) in self.pixel_rows() {
            for ch in 0..CHANNELS {
                let g = cotangent[ch * n_pix + pixel];
                if g == 0.0 {
                    continue;
                }
                let tex = &mut out[ch * n_tex..(ch + 1) * n_tex];
                for e in row {
                    tex[e.texel as usize] += e.weight as f64 * g;
                }
            }
        }
    }
}

/// Edge function: twice the signed area of `(a, b, p)`.
fn edge(a: [f64; 2], b: [f64; 2], p: [f64; 2]) -> f64 {
    (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0])
}

const DEGENERATE_AREA: f64 = 1e-12;

const SNAP: f64 = 1e-9;

/// Rounds coordinates within `SNAP` of a texel centre onto it, so
/// interpolation noise does not leave near-zero neighbour weights.
fn snap(x: f64) -> f64 {
    let r = x.round();
    if (x - r).abs() < SNAP {
        r
    } else {
        x
    }
}

/// Bilinear weights at `uv`, clamped to the texel grid, merged and sorted by
/// texel; exact zeros are dropped.
pub(crate) fn bilinear_weights(uv: [f64; 2], texture_dims: (usize, usize)) -> Vec<(u32, f64)> {
    let (ht, wt) = texture_dims;
    let x = snap((uv[0] * wt as f64 - 0.5).clamp(0.0, (wt - 1) as f64));
    let y = snap((uv[1] * ht as f64 - 0.5).clamp(0.0, (ht - 1) as f64));
    let (x0, y0) = ((x.floor() as usize).min(wt - 1), (y.floor() as usize).min(ht - 1));
    let (x1, y1) = ((x0 + 1).min(wt - 1), (y0 + 1).min(ht - 1));
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    let mut out: Vec<(u32, f64)> = Vec::with_capacity(4);
    for (r, c, w) in [
        (y0, x0, (1.0 - fy) * (1.0 - fx)),
        (y0, x1, (1.0 - fy) * fx),
        (y1, x0, fy * (1.0 - fx)),
        (y1, x1, fy * fx),
    ] {
        let t = (r * wt + c) as u32;
        match out.iter_mut().find(|(k, _)| *k == t) {
            Some(slot) => slot.1 += w,
            None => out.push((t, w)),
        }
    }
    out.retain(|&(_, w)| w > 0.0);
    out.sort_by_key(|&(t, _)| t);
    out
}

/// Rasterizes `mesh` at pixel centres with a z-buffer (smaller depth wins,
/// ties keep the lower face index) and records the bilinear texel weights of
/// each winning surface point.
pub fn build_render_tensor(
    mesh: &BodyMesh,
    camera: &Camera,
    image_dims: (usize, usize),
    texture_dims: (usize, usize),
) -> Result<RenderTensor> {
    camera.validate()?;
    if texture_dims.0 == 0 || texture_dims.1 == 0 {
        return Err(Error::param("texture dims must be positive"));
    }
    if mesh.uv_coords.len() != mesh.faces.len() {
        return Err(Error::param("mesh has no uv triple for every face"));
    }
    let (h, w) = image_dims;
    let projected = project(camera, mesh);
    let mut depth = vec![f64::INFINITY; h * w];
    let mut winner: Vec<Option<(usize, [f64; 3])>> = vec![None; h * w];

    for (f, face) in mesh.faces.iter().enumerate() {
        let p = face.map(|i| projected[i as usize]);
        let (a, b, c) = ([p[0][0], p[0][1]], [p[1][0], p[1][1]], [p[2][0], p[2][1]]);
        let area = edge(a, b, c);
        if !area.is_finite() || area.abs() < DEGENERATE_AREA {
            continue;
        }
        let min_x = a[0].min(b[0]).min(c[0]);
        let max_x = a[0].max(b[0]).max(c[0]);
        let min_y = a[1].min(b[1]).min(c[1]);
        let max_y = a[1].max(b[1]).max(c[1]);
        let col_lo = (min_x - 0.5).ceil().max(0.0);
        let col_hi = (max_x - 0.5).floor().min(w as f64 - 1.0);
        let row_lo = (min_y - 0.5).ceil().max(0.0);
        let row_hi = (max_y - 0.5).floor().min(h as f64 - 1.0);
        if col_lo > col_hi || row_lo > row_hi {
            continue;
        }
        for row in row_lo as usize..=row_hi as usize {
            for col in col_lo as usize..=col_hi as usize {
                let q = [col as f64 + 0.5, row as f64 + 0.5];
                let w0 = edge(b, c, q) / area;
                let w1 = edge(c, a, q) / area;
                let w2 = edge(a, b, q) / area;
                if w0 < 0.0 || w1 < 0.0 || w2 < 0.0 {
                    continue;
                }
                let z = w0 * p[0][2] + w1 * p[1][2] + w2 * p[2][2];
                let idx = row * w + col;
                if z < depth[idx] {
                    depth[idx] = z;
                    winner[idx] = Some((f, [w0, w1, w2]));
                }
            }
        }
    }

    let mut entries = Vec::new();
    let mut bits = vec![false; h * w];
    for (pixel, win) in winner.iter().enumerate() {
        let Some((f, bary)) = win else { continue };
        let uv = mesh.uv_coords[*f];
        let mut sample = [0.0; 2];
        for k in 0..3 {
            sample[0] += bary[k] * uv[k][0];
            sample[1] += bary[k] * uv[k][1];
        }
        bits[pixel] = true;
        for (texel, weight) in bilinear_weights(sample, texture_dims) {
            entries.push(RenderEntry {
                pixel: pixel as u32,
                texel,
                weight: weight as f32,
            });
        }
    }
    RenderTensor::from_parts(image_dims, texture_dims, entries, Mask::new(h, w, bits)?)
}

/// Renders `texture` through `rt` over `background`.
pub fn apply(rt: &RenderTensor, texture: &Texture, background: &RgbGrid) -> Result<RgbGrid> {
    rt.check_texture(texture.dims())?;
    rt.check_image(background.dims())?;
    let (h, w) = rt.image_dims;
    let mut out = background.to_planar();
    rt.apply_planar(&texture.to_planar(), &mut out);
    RgbGrid::from_planar(h, w, &out)
}

/// Pulls an image-space cotangent back to texture space (`Rᵀ · u`).
pub fn apply_transpose(rt: &RenderTensor, image_cotangent: &RgbGrid) -> Result<RgbGrid> {
    rt.check_image(image_cotangent.dims())?;
    let (ht, wt) = rt.texture_dims;
    let mut out = vec![0.0; ht * wt * CHANNELS];
    rt.transpose_planar(&image_cotangent.to_planar(), &mut out);
    RgbGrid::from_planar(ht, wt, &out)
}

/// Foreground mask of the rendered body.
pub fn pose_mask(rt: &RenderTensor) -> Mask {
    rt.coverage.clone()
}
