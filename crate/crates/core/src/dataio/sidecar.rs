//! Pose sidecar: a JSON object
//!
//! ```json
//! { "beta": [10 reals], "theta": [72 reals], "gamma": [3 reals],
//!   "camera": { "scale": s, "center": [cx, cy] } }
//! ```
//!
//! `theta` is 24 axis-angle triples, root first. The camera maps model
//! units to pixels of the image the sidecar belongs to. Array entries may
//! also be the strings `"nan"`, `"inf"` or `"-inf"`; they parse but fail
//! validation.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::bodymodel::{PoseParams, ShapeParams, Translation, NUM_POSE_COEFFS, NUM_SHAPE_COEFFS};
use crate::error::{Error, Result};
use crate::rendering::Camera;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseSidecar {
    pub beta: ShapeParams,
    pub theta: PoseParams,
    pub gamma: Translation,
    pub camera: Camera,
}

fn number(v: &Value, field: &str, i: usize) -> Result<f64> {
    match v {
        Value::Number(n) => n
            .as_f64()
            .ok_or_else(|| Error::format(field, format!("{}[{}] is not representable", field, i))),
        Value::String(s) => match s.to_ascii_lowercase().as_str() {
            "nan" => Ok(f64::NAN),
            "inf" | "+inf" | "infinity" => Ok(f64::INFINITY),
            "-inf" | "-infinity" => Ok(f64::NEG_INFINITY),
            _ => Err(Error::format(field, format!("{}[{}] is not a number", field, i))),
        },
        _ => Err(Error::format(field, format!("{}[{}] is not a number", field, i))),
    }
}

fn reals(doc: &Value, field: &str, len: usize) -> Result<Vec<f64>> {
    let arr = doc
        .get(field)
        .ok_or_else(|| Error::format(field, format!("missing {}", field)))?
        .as_array()
        .ok_or_else(|| Error::format(field, format!("{} must be an array", field)))?;
    if arr.len() != len {
        return Err(Error::format(
            field,
            format!("{} has {} entries, expected {}", field, arr.len(), len),
        ));
    }
    let out: Vec<f64> = arr
        .iter()
        .enumerate()
        .map(|(i, v)| number(v, field, i))
        .collect::<Result<_>>()?;
    if let Some(i) = out.iter().position(|v| !v.is_finite()) {
        return Err(Error::format(field, format!("{}[{}] is not finite", field, i)));
    }
    Ok(out)
}

pub fn parse_pose_sidecar(text: &str) -> Result<PoseSidecar> {
    let doc: Value = serde_json::from_str(text).map_err(|e| Error::format("document", e.to_string()))?;
    let beta = ShapeParams::new(reals(&doc, "beta", NUM_SHAPE_COEFFS)?)?;
    let theta = PoseParams::new(reals(&doc, "theta", NUM_POSE_COEFFS)?)?;
    let g = reals(&doc, "gamma", 3)?;
    let gamma = Translation::new([g[0], g[1], g[2]])?;
    let cam = doc
        .get("camera")
        .ok_or_else(|| Error::format("camera", "missing camera"))?;
    let scale = reals(
        &json!({ "camera.scale": [cam.get("scale").cloned().unwrap_or(Value::Null)] }),
        "camera.scale",
        1,
    )?[0];
    let center = reals(
        &json!({ "camera.center": cam.get("center").cloned().unwrap_or(Value::Null) }),
        "camera.center",
        2,
    )?;
    let camera = Camera::new(scale, [center[0], center[1]])?;
    Ok(PoseSidecar {
        beta,
        theta,
        gamma,
        camera,
    })
}

pub fn load_pose_sidecar(path: &Path) -> Result<PoseSidecar> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_pose_sidecar(&text)
}

pub fn save_pose_sidecar(sidecar: &PoseSidecar, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(sidecar).expect("sidecar is serializable");
    crate::io_util::write_atomic(path, text.as_bytes())
}
