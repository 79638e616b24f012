//! Procedural identities on the desk body, with ground truth kept on disk.
//!
//! Output layout under the dataset root:
//!
//! ```text
//! body.json                  model the images were rendered with
//! reference_texture.png      shared head/hand reference
//! textures/<id>.png          ground-truth texture per identity
//! images/<id>_v<view>.png    rendered views
//! poses/<id>_v<view>.json    sidecars
//! backgrounds/<id>_v<view>.png
//! ```
//!
//! Every stored image equals the 8-bit quantization of
//! `apply(render tensor of its sidecar, its texture, its background)`.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use super::{save_pose_sidecar, DatasetIndex, DatasetRecord, PoseSidecar, Split, CACHE_DIR, IMAGES_DIR, POSES_DIR};
use crate::bodymodel::{
    pose_mesh, region_at, save_model, AtlasRegion, BodyModelSpec, PoseParams, ShapeParams, Translation,
};
use crate::error::{Error, Result};
use crate::grid::{ImageTensor, Texture};
use crate::rendering::{apply, build_render_tensor, Camera};
use crate::rng::derive_rng;

pub const BACKGROUNDS_DIR: &str = "backgrounds";
pub const TEXTURES_DIR: &str = "textures";
pub const REFERENCE_TEXTURE_FILE: &str = "reference_texture.png";
pub const BODY_FILE: &str = "body.json";

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDatasetSpec {
    pub n_identities: usize,
    pub views_per_identity: usize,
    pub image_dims: (usize, usize),
    pub texture_dims: (usize, usize),
    /// Each view draws one of these uniformly.
    pub pose_source: Vec<PoseParams>,
    /// When positive, the root joint of each drawn pose is replaced by a
    /// uniform yaw in `[-yaw_range, yaw_range]`.
    pub yaw_range: f64,
    pub first_identity: u32,
    pub seed: u64,
}

impl SyntheticDatasetSpec {
    /// 64×32 images, 32×32 textures, an 8-phase walk cycle, any heading.
    pub fn desk(n_identities: usize, views_per_identity: usize, seed: u64) -> Self {
        Self {
            n_identities,
            views_per_identity,
            image_dims: (64, 32),
            texture_dims: (32, 32),
            pose_source: walking_poses(8),
            yaw_range: PI,
            first_identity: 1,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_identities == 0 || self.views_per_identity == 0 {
            return Err(Error::config("identity and view counts must be at least 1"));
        }
        if self.image_dims.0 == 0 || self.image_dims.1 == 0 || self.texture_dims.0 == 0 || self.texture_dims.1 == 0 {
            return Err(Error::config("image and texture dims must be positive"));
        }
        if self.pose_source.is_empty() {
            return Err(Error::config("pose source is empty"));
        }
        if !(self.yaw_range.is_finite() && self.yaw_range >= 0.0) {
            return Err(Error::config("yaw range must be finite and non-negative"));
        }
        if self.first_identity == 0 {
            return Err(Error::config("identity 0 is reserved for unknown labels"));
        }
        Ok(())
    }

    pub fn identities(&self) -> Vec<u32> {
        (0..self.n_identities as u32).map(|i| self.first_identity + i).collect()
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub root: PathBuf,
    pub index: DatasetIndex,
    /// Ground-truth texture per identity, as stored.
    pub textures: BTreeMap<u32, Texture>,
    pub reference: Texture,
}

/// One walk cycle sampled at `n` evenly spaced phases, root unrotated.
pub fn walking_poses(n: usize) -> Vec<PoseParams> {
    (0..n)
        .map(|k| {
            let phase = 2.0 * PI * k as f64 / n.max(1) as f64;
            let s = phase.sin();
            let mut p = PoseParams::zeros();
            // Negative x-rotation swings a limb towards the camera.
            p.set_joint(1, [-0.4 * s, 0.0, 0.0]);
            p.set_joint(2, [0.4 * s, 0.0, 0.0]);
            p.set_joint(4, [0.1 + 0.5 * s.max(0.0), 0.0, 0.0]);
            p.set_joint(5, [0.1 + 0.5 * (-s).max(0.0), 0.0, 0.0]);
            p.set_joint(16, [0.35 * s, 0.0, -0.12]);
            p.set_joint(17, [-0.35 * s, 0.0, 0.12]);
            p.set_joint(18, [-0.3, 0.0, 0.0]);
            p.set_joint(19, [-0.3, 0.0, 0.0]);
            p
        })
        .collect()
}

/// Camera framing the standing desk body inside an `(h, w)` image.
pub fn default_camera(image_dims: (usize, usize)) -> Camera {
    let (h, w) = (image_dims.0 as f64, image_dims.1 as f64);
    let scale = 0.92 * h / 1.6;
    Camera {
        scale,
        center: [w / 2.0, h / 2.0 - scale * 0.1],
    }
}

const SKIN: [f64; 3] = [0.87, 0.68, 0.56];
const HAIR: [f64; 3] = [0.22, 0.15, 0.1];
const EYE: [f64; 3] = [0.12, 0.1, 0.1];
const UNUSED: [f64; 3] = [0.5, 0.5, 0.5];

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let c = v * s;
    let x = c * (1.0 - (h6 % 2.0 - 1.0).abs());
    let (r, g, b) = match h6 as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

fn texel_uv(r: usize, c: usize, dims: (usize, usize)) -> (f64, f64) {
    ((c as f64 + 0.5) / dims.1 as f64, (r as f64 + 0.5) / dims.0 as f64)
}

fn head_color(s: f64, t: f64) -> [f64; 3] {
    // s = 0.5 faces the camera, t runs from crown to chin.
    let back = (s - 0.5).abs() > 0.3;
    if t < 0.32 || (back && t < 0.72) {
        return HAIR;
    }
    let eye = (t - 0.48).abs() < 0.05 && ((s - 0.44).abs() < 0.025 || (s - 0.56).abs() < 0.025);
    if eye {
        EYE
    } else {
        SKIN
    }
}

fn reference_at(region: AtlasRegion, s: f64, t: f64) -> [f64; 3] {
    match region {
        AtlasRegion::Head => head_color(s, t),
        AtlasRegion::Hand => SKIN,
        _ => UNUSED,
    }
}

/// The head/hand reference shared by every synthetic identity, quantized.
pub fn reference_texture(body: &BodyModelSpec, dims: (usize, usize)) -> Texture {
    let mask = body.face_hand_mask.resampled(dims.0, dims.1);
    Texture::from_fn(dims.0, dims.1, |r, c| {
        let (u, v) = texel_uv(r, c, dims);
        let (region, s, t) = region_at(u, v);
        if mask.get(r, c) {
            reference_at(region, s, t)
        } else {
            UNUSED
        }
    })
    .quantized()
}

struct Outfit {
    shirt: [f64; 3],
    stripe: Option<([f64; 3], f64)>,
    pants: [f64; 3],
    shoes: [f64; 3],
    long_sleeves: bool,
    field: [(f64, f64, f64); 3],
}

fn outfit(rng: &mut impl Rng) -> Outfit {
    let shirt = hsv(rng.random(), rng.random_range(0.35..0.9), rng.random_range(0.35..0.95));
    let stripe = if rng.random_bool(0.5) {
        let c = hsv(rng.random(), rng.random_range(0.2..0.9), rng.random_range(0.2..1.0));
        Some((c, rng.random_range(3.0..7.0_f64).floor()))
    } else {
        None
    };
    let pants = hsv(rng.random(), rng.random_range(0.1..0.7), rng.random_range(0.15..0.75));
    let g = rng.random_range(0.05..0.2);
    let shoes = [g, g * 0.9, g * 0.8];
    let long_sleeves = rng.random_bool(0.5);
    let mut field = [(0.0, 0.0, 0.0); 3];
    for f in &mut field {
        *f = (
            rng.random_range(0.5..2.0),
            rng.random_range(0.5..2.0),
            rng.random_range(0.0..2.0 * PI),
        );
    }
    Outfit {
        shirt,
        stripe,
        pants,
        shoes,
        long_sleeves,
        field,
    }
}

/// Ground-truth texture of `identity`: head and hands follow the shared
/// reference, clothing is drawn from `(seed, identity)`. Quantized.
pub fn identity_texture(body: &BodyModelSpec, identity: u32, dims: (usize, usize), seed: u64) -> Texture {
    let mut rng = derive_rng(seed, &[2, identity as u64]);
    let o = outfit(&mut rng);
    let mask = body.face_hand_mask.resampled(dims.0, dims.1);
    Texture::from_fn(dims.0, dims.1, |r, c| {
        let (u, v) = texel_uv(r, c, dims);
        let (region, s, t) = region_at(u, v);
        if mask.get(r, c) {
            return reference_at(region, s, t);
        }
        let base = match region {
            AtlasRegion::Torso => match o.stripe {
                Some((color, n)) if (t * n).fract() < 0.5 => color,
                _ => o.shirt,
            },
            AtlasRegion::UpperArm => o.shirt,
            AtlasRegion::Forearm if o.long_sleeves => o.shirt,
            AtlasRegion::Forearm | AtlasRegion::Head | AtlasRegion::Hand => SKIN,
            AtlasRegion::Thigh | AtlasRegion::Shin => o.pants,
            AtlasRegion::Foot => o.shoes,
            AtlasRegion::Unused => return UNUSED,
        };
        let mut out = base;
        for (ch, &(fs, ft, phi)) in o.field.iter().enumerate() {
            out[ch] = (out[ch] + 0.05 * (2.0 * PI * (fs * s + ft * t) + phi).sin()).clamp(0.0, 1.0);
        }
        out
    })
    .quantized()
}

/// Low-contrast gradient with a few flat blocks, quantized. Backgrounds
/// stay desaturated and mid-toned so they do not dominate identity features.
fn procedural_background(dims: (usize, usize), rng: &mut impl Rng) -> ImageTensor {
    let top = hsv(rng.random(), rng.random_range(0.0..0.15), rng.random_range(0.4..0.6));
    let bottom = hsv(rng.random(), rng.random_range(0.0..0.15), rng.random_range(0.4..0.6));
    let blocks: Vec<(f64, f64, f64, f64, [f64; 3])> = (0..rng.random_range(1..4))
        .map(|_| {
            let (y0, x0) = (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0));
            let (hh, ww) = (rng.random_range(0.1..0.5), rng.random_range(0.1..0.6));
            (
                y0,
                x0,
                y0 + hh,
                x0 + ww,
                hsv(rng.random(), rng.random_range(0.0..0.15), rng.random_range(0.35..0.65)),
            )
        })
        .collect();
    let (h, w) = dims;
    ImageTensor::from_fn(h, w, |r, c| {
        let (y, x) = ((r as f64 + 0.5) / h as f64, (c as f64 + 0.5) / w as f64);
        for &(y0, x0, y1, x1, color) in &blocks {
            if y >= y0 && y < y1 && x >= x0 && x < x1 {
                return color;
            }
        }
        [0, 1, 2].map(|k| top[k] * (1.0 - y) + bottom[k] * y)
    })
    .quantized()
}

fn identity_shape(seed: u64, identity: u32) -> ShapeParams {
    let mut rng = derive_rng(seed, &[1, identity as u64]);
    let normal = Normal::new(0.0f64, 0.6).expect("valid normal");
    ShapeParams::new(
        (0..crate::bodymodel::NUM_SHAPE_COEFFS)
            .map(|_| normal.sample(&mut rng).clamp(-1.5, 1.5))
            .collect(),
    )
    .expect("finite shape")
}

pub fn view_stem(identity: u32, view: usize) -> String {
    format!("{:04}_v{:03}", identity, view)
}

/// Writes the dataset under `out_dir`. Identical specs produce identical
/// files.
pub fn generate_synthetic_dataset(
    spec: &SyntheticDatasetSpec,
    body: &BodyModelSpec,
    out_dir: &Path,
) -> Result<SyntheticDataset> {
    spec.validate()?;
    body.validate()?;
    for d in [IMAGES_DIR, POSES_DIR, BACKGROUNDS_DIR, TEXTURES_DIR] {
        crate::io_util::create_dir(&out_dir.join(d))?;
    }
    save_model(body, &out_dir.join(BODY_FILE))?;
    let reference = reference_texture(body, spec.texture_dims);
    reference.save_png(&out_dir.join(REFERENCE_TEXTURE_FILE))?;

    let mut textures = BTreeMap::new();
    for id in spec.identities() {
        let tex = identity_texture(body, id, spec.texture_dims, spec.seed);
        tex.save_png(&out_dir.join(TEXTURES_DIR).join(format!("{:04}.png", id)))?;
        textures.insert(id, tex);
    }

    let jobs: Vec<(u32, usize)> = spec
        .identities()
        .into_iter()
        .flat_map(|id| (0..spec.views_per_identity).map(move |v| (id, v)))
        .collect();
    let records: Vec<DatasetRecord> = jobs
        .par_iter()
        .map(|&(id, view)| {
            let mut rng = derive_rng(spec.seed, &[3, id as u64, view as u64]);
            let mut theta = spec.pose_source[rng.random_range(0..spec.pose_source.len())].clone();
            if spec.yaw_range > 0.0 {
                theta.set_joint(0, [0.0, rng.random_range(-spec.yaw_range..=spec.yaw_range), 0.0]);
            }
            let sidecar = PoseSidecar {
                beta: identity_shape(spec.seed, id),
                theta,
                gamma: Translation::zero(),
                camera: default_camera(spec.image_dims),
            };
            let background = procedural_background(spec.image_dims, &mut rng);
            let mesh = pose_mesh(body, &sidecar.beta, &sidecar.theta, &sidecar.gamma)?;
            let rt = build_render_tensor(&mesh, &sidecar.camera, spec.image_dims, spec.texture_dims)?;
            let image = apply(&rt, &textures[&id], &background)?.quantized();

            let stem = view_stem(id, view);
            let image_path = out_dir.join(IMAGES_DIR).join(format!("{}.png", stem));
            let sidecar_path = out_dir.join(POSES_DIR).join(format!("{}.json", stem));
            image.save_png(&image_path)?;
            background.save_png(&out_dir.join(BACKGROUNDS_DIR).join(format!("{}.png", stem)))?;
            save_pose_sidecar(&sidecar, &sidecar_path)?;
            Ok(DatasetRecord {
                image_path,
                identity: id,
                sidecar_path,
                cache_path: out_dir.join(CACHE_DIR).join(format!("{}.rten", stem)),
            })
        })
        .collect::<Result<_>>()?;

    Ok(SyntheticDataset {
        root: out_dir.to_path_buf(),
        index: DatasetIndex {
            records,
            split: Split::Train,
        },
        textures,
        reference,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bodymodel::make_desk_body;
    use crate::dataio::load_pose_sidecar;

    fn tiny_spec(seed: u64) -> SyntheticDatasetSpec {
        SyntheticDatasetSpec {
            n_identities: 2,
            views_per_identity: 3,
            image_dims: (32, 16),
            texture_dims: (16, 16),
            ..SyntheticDatasetSpec::desk(2, 3, seed)
        }
    }

    #[test]
    fn counts_and_self_consistency() {
        let body = make_desk_body(1);
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_synthetic_dataset(&tiny_spec(5), &body, dir.path()).unwrap();
        assert_eq!(ds.index.len(), 6);
        assert_eq!(ds.textures.len(), 2);
        assert_eq!(std::fs::read_dir(dir.path().join(POSES_DIR)).unwrap().count(), 6);
        assert_eq!(std::fs::read_dir(dir.path().join(TEXTURES_DIR)).unwrap().count(), 2);
        for r in &ds.index.records {
            let sc = load_pose_sidecar(&r.sidecar_path).unwrap();
            let tex = Texture::load(&dir.path().join(TEXTURES_DIR).join(format!("{:04}.png", r.identity))).unwrap();
            let bg = ImageTensor::load(&dir.path().join(BACKGROUNDS_DIR).join(format!("{}.png", r.stem()))).unwrap();
            let mesh = pose_mesh(&body, &sc.beta, &sc.theta, &sc.gamma).unwrap();
            let rt = build_render_tensor(&mesh, &sc.camera, (32, 16), (16, 16)).unwrap();
            let again = apply(&rt, &tex, &bg).unwrap().quantized();
            assert_eq!(again, ImageTensor::load(&r.image_path).unwrap());
            assert!(rt.coverage().count() > 50);
        }
    }

    #[test]
    fn same_seed_same_bytes() {
        let body = make_desk_body(1);
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let da = generate_synthetic_dataset(&tiny_spec(9), &body, a.path()).unwrap();
        generate_synthetic_dataset(&tiny_spec(9), &body, b.path()).unwrap();
        for r in &da.index.records {
            let name = r.image_path.file_name().unwrap();
            assert_eq!(
                std::fs::read(&r.image_path).unwrap(),
                std::fs::read(b.path().join(IMAGES_DIR).join(name)).unwrap()
            );
        }
    }

    #[test]
    fn identities_differ_but_share_reference() {
        let body = make_desk_body(1);
        let (a, b) = (
            identity_texture(&body, 1, (32, 32), 0),
            identity_texture(&body, 2, (32, 32), 0),
        );
        assert!(a.max_abs_diff(&b) > 0.1);
        let mask = body.face_hand_mask.resampled(32, 32);
        let reference = reference_texture(&body, (32, 32));
        assert_eq!(a.masked(&mask).unwrap(), reference.masked(&mask).unwrap());
    }

    #[test]
    fn desk_body_fits_default_frame() {
        let body = make_desk_body(1);
        let cam = default_camera((64, 32));
        for theta in walking_poses(8) {
            for yaw in [-PI, -1.0, 0.0, 2.0] {
                let mut theta = theta.clone();
                theta.set_joint(0, [0.0, yaw, 0.0]);
                let mesh = pose_mesh(&body, &ShapeParams::zeros(), &theta, &Translation::zero()).unwrap();
                for p in crate::rendering::project(&cam, &mesh) {
                    assert!(p[0] > 0.0 && p[0] < 32.0 && p[1] > 0.0 && p[1] < 64.0, "{:?}", p);
                }
            }
        }
    }
}
