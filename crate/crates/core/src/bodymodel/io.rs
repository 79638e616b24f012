//! JSON model document.
//!
//! ```text
//! {
//!   "format": "retexture-body-model", "version": 1,
//!   "template_vertices": [[x, y, z], ...],          // N rows
//!   "faces": [[i, j, k], ...],                       // F rows
//!   "joint_tree": [null, 0, 0, ...],                 // 24 parents
//!   "joint_regressor": [[...N reals...], ...],       // 24 rows
//!   "skin_weights": [[...24 reals...], ...],         // N rows
//!   "shape_dirs": [[[...10...], [...10...], [...10...]], ...],  // N × 3 × 10
//!   "uv_coords": [[[u, v], [u, v], [u, v]], ...],    // F rows
//!   "face_hand_mask": {"height": h, "width": w, "rows": ["0110...", ...]}
//! }
//! ```
//!
//! Reals are written in shortest round-trip form, so load after save is
//! exact.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{BodyModelSpec, Vec3, NUM_JOINTS, NUM_SHAPE_COEFFS};
use crate::error::{Error, Result};
use crate::grid::Mask;

const FORMAT_TAG: &str = "retexture-body-model";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct MaskDoc {
    height: usize,
    width: usize,
    rows: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct ModelDoc {
    format: String,
    version: u32,
    template_vertices: Vec<Vec3>,
    faces: Vec<[u32; 3]>,
    joint_tree: Vec<Option<usize>>,
    joint_regressor: Vec<Vec<f64>>,
    skin_weights: Vec<Vec<f64>>,
    shape_dirs: Vec<[[f64; NUM_SHAPE_COEFFS]; 3]>,
    uv_coords: Vec<[[f64; 2]; 3]>,
    face_hand_mask: MaskDoc,
}

fn mask_to_doc(mask: &Mask) -> MaskDoc {
    let rows = mask
        .bits()
        .chunks(mask.width())
        .map(|row| row.iter().map(|&b| if b { '1' } else { '0' }).collect())
        .collect();
    MaskDoc {
        height: mask.height(),
        width: mask.width(),
        rows,
    }
}

fn mask_from_doc(doc: MaskDoc) -> Result<Mask> {
    if doc.rows.len() != doc.height {
        return Err(Error::format(
            "face_hand_mask",
            format!("expected {} rows, found {}", doc.height, doc.rows.len()),
        ));
    }
    let mut bits = Vec::with_capacity(doc.height * doc.width);
    for (r, row) in doc.rows.iter().enumerate() {
        if row.chars().count() != doc.width {
            return Err(Error::format(
                "face_hand_mask",
                format!("row {} does not have {} columns", r, doc.width),
            ));
        }
        for ch in row.chars() {
            match ch {
                '0' => bits.push(false),
                '1' => bits.push(true),
                other => {
                    return Err(Error::format(
                        "face_hand_mask",
                        format!("unexpected character {:?} in row {}", other, r),
                    ))
                }
            }
        }
    }
    Mask::new(doc.height, doc.width, bits)
}

pub fn save_model(spec: &BodyModelSpec, path: &Path) -> Result<()> {
    let doc = ModelDoc {
        format: FORMAT_TAG.to_string(),
        version: VERSION,
        template_vertices: spec.template_vertices.clone(),
        faces: spec.faces.clone(),
        joint_tree: spec.joint_tree.clone(),
        joint_regressor: spec.joint_regressor.clone(),
        skin_weights: spec.skin_weights.iter().map(|w| w.to_vec()).collect(),
        shape_dirs: spec.shape_dirs.clone(),
        uv_coords: spec.uv_coords.clone(),
        face_hand_mask: mask_to_doc(&spec.face_hand_mask),
    };
    let text = serde_json::to_string(&doc).map_err(|e| Error::format("document", e.to_string()))?;
    crate::io_util::write_atomic(path, text.as_bytes())
}

pub fn load_model(path: &Path) -> Result<BodyModelSpec> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_model(&text)
}

pub(crate) fn parse_model(text: &str) -> Result<BodyModelSpec> {
    let doc: ModelDoc = serde_json::from_str(text).map_err(|e| Error::format("document", e.to_string()))?;
    if doc.format != FORMAT_TAG {
        return Err(Error::format("format", format!("unexpected tag {:?}", doc.format)));
    }
    if doc.version != VERSION {
        return Err(Error::format("version", format!("unsupported version {}", doc.version)));
    }
    let skin_weights = doc
        .skin_weights
        .iter()
        .enumerate()
        .map(|(i, row)| {
            <[f64; NUM_JOINTS]>::try_from(row.as_slice()).map_err(|_| {
                Error::format(
                    "skin_weights",
                    format!("row {} has {} entries, expected {}", i, row.len(), NUM_JOINTS),
                )
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let spec = BodyModelSpec {
        template_vertices: doc.template_vertices,
        faces: doc.faces,
        joint_tree: doc.joint_tree,
        joint_regressor: doc.joint_regressor,
        skin_weights,
        shape_dirs: doc.shape_dirs,
        uv_coords: doc.uv_coords,
        face_hand_mask: mask_from_doc(doc.face_hand_mask)?,
    };
    spec.validate()?;
    Ok(spec)
}
