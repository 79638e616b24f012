//! Dataset layout, pose sidecars, backgrounds, render-tensor precompute and
//! the synthetic identity generator.
//!
//! A dataset root holds `images/<id>_<rest>.<png|jpg>`, one sidecar per
//! image at `poses/<stem>.json`, and render-tensor caches at
//! `cache/<stem>.rten`.

mod background;
mod precompute;
mod sidecar;
mod synthetic;

pub use background::{BackgroundPool, MID_GRAY};
pub use precompute::{precompute_render_tensors, render_tensor_for, rescale_camera, PrecomputeReport, RenderDims};
pub use sidecar::{load_pose_sidecar, parse_pose_sidecar, save_pose_sidecar, PoseSidecar};
pub use synthetic::{
    default_camera, generate_synthetic_dataset, identity_texture, reference_texture, view_stem, walking_poses,
    SyntheticDataset, SyntheticDatasetSpec, BACKGROUNDS_DIR, BODY_FILE, REFERENCE_TEXTURE_FILE, TEXTURES_DIR,
};

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::ImageTensor;

pub const IMAGES_DIR: &str = "images";
pub const POSES_DIR: &str = "poses";
pub const CACHE_DIR: &str = "cache";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub image_path: PathBuf,
    pub identity: u32,
    pub sidecar_path: PathBuf,
    pub cache_path: PathBuf,
}

impl DatasetRecord {
    /// File stem of the image, used to name derived files.
    pub fn stem(&self) -> String {
        self.image_path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub records: Vec<DatasetRecord>,
    pub split: Split,
}

impl DatasetIndex {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Sorted distinct identities.
    pub fn identities(&self) -> Vec<u32> {
        let set: BTreeSet<u32> = self.records.iter().map(|r| r.identity).collect();
        set.into_iter().collect()
    }

    /// Records whose identity is in `ids`, keeping order.
    pub fn filter_identities(&self, ids: &[u32], split: Split) -> Self {
        Self {
            records: self
                .records
                .iter()
                .filter(|r| ids.contains(&r.identity))
                .cloned()
                .collect(),
            split,
        }
    }

    pub fn load_image(&self, i: usize, dims: (usize, usize)) -> Result<ImageTensor> {
        load_image(&self.records[i].image_path, dims)
    }

    pub fn load_images(&self, dims: (usize, usize)) -> Result<Vec<ImageTensor>> {
        (0..self.len()).map(|i| self.load_image(i, dims)).collect()
    }

    pub fn load_sidecars(&self) -> Result<Vec<PoseSidecar>> {
        self.records
            .iter()
            .map(|r| load_pose_sidecar(&r.sidecar_path))
            .collect()
    }
}

/// Loads an 8-bit image as `[0, 1]` reals, bilinearly resized to `dims`.
pub fn load_image(path: &Path, dims: (usize, usize)) -> Result<ImageTensor> {
    let img = ImageTensor::load(path)?;
    Ok(if img.dims() == dims {
        img
    } else {
        img.resized(dims.0, dims.1)
    })
}

/// Which identities form the test split.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitSpec {
    /// Exactly these identities are tested.
    TestIds(Vec<u32>),
    /// The numerically largest `n` identities are tested.
    LastIds(usize),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SkipEntry {
    pub path: PathBuf,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScannedDataset {
    pub train: DatasetIndex,
    pub test: DatasetIndex,
    pub skipped: Vec<SkipEntry>,
}

/// Line-oriented report, one `path: reason` per line.
pub fn format_skip_report(entries: &[SkipEntry]) -> String {
    let mut s = String::new();
    for e in entries {
        writeln!(s, "{}: {}", e.path.display(), e.reason).unwrap();
    }
    s
}

/// Identity prefix of `<id>_<rest>.<ext>`. Returns `Ok(None)` for the
/// unknown labels `-1` and `0`.
pub fn parse_identity(file_name: &str) -> std::result::Result<Option<u32>, String> {
    let (prefix, _) = file_name
        .split_once('_')
        .ok_or_else(|| "file name has no identity prefix".to_string())?;
    let id: i64 = prefix
        .parse()
        .map_err(|_| format!("identity prefix {:?} is not an integer", prefix))?;
    match id {
        -1 | 0 => Ok(None),
        i if i > 0 && i <= u32::MAX as i64 => Ok(Some(i as u32)),
        i => Err(format!("identity {} is out of range", i)),
    }
}

/// Scans `root`. Unknown labels are dropped silently; unreadable names,
/// unsupported extensions and missing sidecars go to the skip report.
pub fn scan_dataset(root: &Path, split: &SplitSpec) -> Result<ScannedDataset> {
    let images = root.join(IMAGES_DIR);
    let mut names: Vec<PathBuf> = match std::fs::read_dir(&images) {
        Ok(rd) => rd
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.is_file())
            .collect(),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
        Err(e) => return Err(Error::io(&images, e)),
    };
    names.sort();
    let mut records = Vec::new();
    let mut skipped = Vec::new();
    for path in names {
        let file_name = path.file_name().unwrap().to_string_lossy().into_owned();
        let ext_ok = path
            .extension()
            .map(|e| ["png", "jpg", "jpeg"].iter().any(|k| e.eq_ignore_ascii_case(k)))
            .unwrap_or(false);
        if !ext_ok {
            skipped.push(SkipEntry {
                path,
                reason: "unsupported image format".into(),
            });
            continue;
        }
        let identity = match parse_identity(&file_name) {
            Ok(Some(id)) => id,
            Ok(None) => continue,
            Err(reason) => {
                skipped.push(SkipEntry { path, reason });
                continue;
            }
        };
        let stem = path.file_stem().unwrap().to_string_lossy().into_owned();
        let sidecar_path = root.join(POSES_DIR).join(format!("{}.json", stem));
        if !sidecar_path.is_file() {
            skipped.push(SkipEntry {
                path,
                reason: format!("missing sidecar {}", sidecar_path.display()),
            });
            continue;
        }
        records.push(DatasetRecord {
            cache_path: root.join(CACHE_DIR).join(format!("{}.rten", stem)),
            image_path: path,
            identity,
            sidecar_path,
        });
    }
    if records.is_empty() {
        return Err(Error::dataset(format!("no usable images under {}", images.display())));
    }
    let all = DatasetIndex {
        records,
        split: Split::Train,
    };
    let ids = all.identities();
    let test_ids: Vec<u32> = match split {
        SplitSpec::TestIds(t) => t.clone(),
        SplitSpec::LastIds(n) => ids[ids.len().saturating_sub(*n)..].to_vec(),
    };
    let train_ids: Vec<u32> = ids.iter().copied().filter(|i| !test_ids.contains(i)).collect();
    Ok(ScannedDataset {
        train: all.filter_identities(&train_ids, Split::Train),
        test: all.filter_identities(&test_ids, Split::Test),
        skipped,
    })
}
