//! Parametric body mesh: shape blendshapes, forward kinematics over a
//! 24-joint tree, and linear blend skinning.
//!
//! Model space is image aligned: `x` right, `y` down, `z` away from the
//! camera. A weak-perspective camera therefore maps `(x, y)` straight to
//! pixel coordinates and uses `z` only for visibility.

mod desk;
mod io;

pub use desk::{make_desk_body, region_at, AtlasRegion, DESK_JOINT_NAMES};
pub use io::{load_model, save_model};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Mask;

/// Root plus the 23 body joints.
pub const NUM_JOINTS: usize = 24;
pub const NUM_SHAPE_COEFFS: usize = 10;
pub const NUM_POSE_COEFFS: usize = NUM_JOINTS * 3;

pub type Vec3 = [f64; 3];
pub type Mat3 = [[f64; 3]; 3];

/// Shape blendshape coefficients `β`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ShapeParams(Vec<f64>);

/// Per-joint axis-angle rotations `θ`, root first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct PoseParams(Vec<f64>);

/// Global translation `γ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Translation(Vec3);

fn check_finite_len(name: &str, values: &[f64], len: usize) -> Result<()> {
    if values.len() != len {
        return Err(Error::format(
            name,
            format!("expected {} values, found {}", len, values.len()),
        ));
    }
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::format(name, format!("entry {} is not finite", i)));
    }
    Ok(())
}

impl ShapeParams {
    pub fn new(beta: Vec<f64>) -> Result<Self> {
        check_finite_len("beta", &beta, NUM_SHAPE_COEFFS)?;
        Ok(Self(beta))
    }

    pub fn zeros() -> Self {
        Self(vec![0.0; NUM_SHAPE_COEFFS])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

impl PoseParams {
    pub fn new(theta: Vec<f64>) -> Result<Self> {
        check_finite_len("theta", &theta, NUM_POSE_COEFFS)?;
        Ok(Self(theta))
    }

    pub fn zeros() -> Self {
        Self(vec![0.0; NUM_POSE_COEFFS])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn joint(&self, j: usize) -> Vec3 {
        [self.0[3 * j], self.0[3 * j + 1], self.0[3 * j + 2]]
    }

    pub fn set_joint(&mut self, j: usize, axis_angle: Vec3) {
        self.0[3 * j..3 * j + 3].copy_from_slice(&axis_angle);
    }
}

impl Translation {
    pub fn new(gamma: Vec3) -> Result<Self> {
        check_finite_len("gamma", &gamma, 3)?;
        Ok(Self(gamma))
    }

    pub fn zero() -> Self {
        Self([0.0; 3])
    }

    pub fn as_array(&self) -> Vec3 {
        self.0
    }
}

macro_rules! vec_conversions {
    ($ty:ident, $ctor:expr) => {
        impl TryFrom<Vec<f64>> for $ty {
            type Error = Error;
            fn try_from(v: Vec<f64>) -> Result<Self> {
                $ctor(v)
            }
        }
        impl From<$ty> for Vec<f64> {
            fn from(p: $ty) -> Vec<f64> {
                p.0.to_vec()
            }
        }
    };
}

vec_conversions!(ShapeParams, ShapeParams::new);
vec_conversions!(PoseParams, PoseParams::new);
vec_conversions!(Translation, |v: Vec<f64>| {
    check_finite_len("gamma", &v, 3)?;
    Translation::new([v[0], v[1], v[2]])
});

/// Rest-pose template with everything needed to pose it.
#[derive(Debug, Clone, PartialEq)]
pub struct BodyModelSpec {
    pub template_vertices: Vec<Vec3>,
    pub faces: Vec<[u32; 3]>,
    /// Parent of each joint; `None` only for the root.
    pub joint_tree: Vec<Option<usize>>,
    /// `NUM_JOINTS × N` rows mapping shaped vertices to joint locations.
    pub joint_regressor: Vec<Vec<f64>>,
    pub skin_weights: Vec<[f64; NUM_JOINTS]>,
    /// Per vertex, per axis, per shape coefficient.
    pub shape_dirs: Vec<[[f64; NUM_SHAPE_COEFFS]; 3]>,
    /// One `(u, v)` per face corner.
    pub uv_coords: Vec<[[f64; 2]; 3]>,
    /// Texture-space mask of the head and hands.
    pub face_hand_mask: Mask,
}

impl BodyModelSpec {
    pub fn vertex_count(&self) -> usize {
        self.template_vertices.len()
    }

    pub fn face_count(&self) -> usize {
        self.faces.len()
    }

    /// Checks every structural invariant, naming the first offending field.
    pub fn validate(&self) -> Result<()> {
        let n = self.vertex_count();
        if n == 0 {
            return Err(Error::format("template_vertices", "no vertices"));
        }
        if self.template_vertices.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::format("template_vertices", "non-finite coordinate"));
        }
        for (f, face) in self.faces.iter().enumerate() {
            if face.iter().any(|&i| i as usize >= n) {
                return Err(Error::format(
                    "faces",
                    format!("face {} references a vertex index >= {}", f, n),
                ));
            }
        }
        self.validate_joint_tree()?;
        if self.joint_regressor.len() != NUM_JOINTS {
            return Err(Error::format(
                "joint_regressor",
                format!("expected {} rows, found {}", NUM_JOINTS, self.joint_regressor.len()),
            ));
        }
        if let Some(j) = self.joint_regressor.iter().position(|row| row.len() != n) {
            return Err(Error::format(
                "joint_regressor",
                format!("row {} does not have {} columns", j, n),
            ));
        }
        if self.joint_regressor.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::format("joint_regressor", "non-finite entry"));
        }
        if self.skin_weights.len() != n {
            return Err(Error::format(
                "skin_weights",
                format!("expected {} rows, found {}", n, self.skin_weights.len()),
            ));
        }
        for (i, row) in self.skin_weights.iter().enumerate() {
            if row.iter().any(|&w| !(w >= 0.0) || !w.is_finite()) {
                return Err(Error::format(
                    "skin_weights",
                    format!("row {} has a negative or non-finite weight", i),
                ));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-6 {
                return Err(Error::format(
                    "skin_weights",
                    format!("row {} sums to {}, expected 1", i, sum),
                ));
            }
        }
        if self.shape_dirs.len() != n {
            return Err(Error::format(
                "shape_dirs",
                format!("expected {} rows, found {}", n, self.shape_dirs.len()),
            ));
        }
        if self.shape_dirs.iter().flatten().flatten().any(|v| !v.is_finite()) {
            return Err(Error::format("shape_dirs", "non-finite entry"));
        }
        if self.uv_coords.len() != self.faces.len() {
            return Err(Error::format(
                "uv_coords",
                format!(
                    "expected one uv triple per face ({}), found {}",
                    self.faces.len(),
                    self.uv_coords.len()
                ),
            ));
        }
        for (f, corners) in self.uv_coords.iter().enumerate() {
            if corners.iter().flatten().any(|&c| !(0.0..=1.0).contains(&c)) {
                return Err(Error::format(
                    "uv_coords",
                    format!("face {} has a coordinate outside [0, 1]", f),
                ));
            }
        }
        if self.face_hand_mask.height() == 0 || self.face_hand_mask.width() == 0 {
            return Err(Error::format("face_hand_mask", "empty mask"));
        }
        Ok(())
    }

    fn validate_joint_tree(&self) -> Result<()> {
        if self.joint_tree.len() != NUM_JOINTS {
            return Err(Error::format(
                "joint_tree",
                format!("expected {} joints, found {}", NUM_JOINTS, self.joint_tree.len()),
            ));
        }
        let roots = self.joint_tree.iter().filter(|p| p.is_none()).count();
        if roots != 1 {
            return Err(Error::format(
                "joint_tree",
                format!("expected exactly one root, found {}", roots),
            ));
        }
        for (j, parent) in self.joint_tree.iter().enumerate() {
            if let Some(p) = parent {
                if *p >= NUM_JOINTS || *p == j {
                    return Err(Error::format(
                        "joint_tree",
                        format!("joint {} has invalid parent {}", j, p),
                    ));
                }
            }
        }
        if self.joint_order().is_none() {
            return Err(Error::format("joint_tree", "cycle in parent links"));
        }
        Ok(())
    }

    /// Joints ordered so that every parent precedes its children.
    fn joint_order(&self) -> Option<Vec<usize>> {
        let mut order = Vec::with_capacity(NUM_JOINTS);
        let mut placed = [false; NUM_JOINTS];
        while order.len() < NUM_JOINTS {
            let before = order.len();
            for j in 0..NUM_JOINTS {
                if placed[j] {
                    continue;
                }
                let ready = match self.joint_tree[j] {
                    None => true,
                    Some(p) => placed[p],
                };
                if ready {
                    placed[j] = true;
                    order.push(j);
                }
            }
            if order.len() == before {
                return None;
            }
        }
        Some(order)
    }

    /// `joint` together with all of its descendants.
    pub fn subtree(&self, joint: usize) -> Vec<usize> {
        (0..NUM_JOINTS)
            .filter(|&j| {
                let mut cur = Some(j);
                while let Some(c) = cur {
                    if c == joint {
                        return true;
                    }
                    cur = self.joint_tree[c];
                }
                false
            })
            .collect()
    }

    /// Template plus the linear shape offset.
    pub fn shaped_vertices(&self, beta: &ShapeParams) -> Vec<Vec3> {
        let b = beta.as_slice();
        self.template_vertices
            .iter()
            .zip(&self.shape_dirs)
            .map(|(t, dirs)| {
                let mut v = *t;
                for axis in 0..3 {
                    v[axis] += dirs[axis].iter().zip(b).map(|(d, c)| d * c).sum::<f64>();
                }
                v
            })
            .collect()
    }

    pub fn regress_joints(&self, vertices: &[Vec3]) -> Vec<Vec3> {
        self.joint_regressor
            .iter()
            .map(|row| {
                let mut j = [0.0; 3];
                for (w, v) in row.iter().zip(vertices) {
                    if *w != 0.0 {
                        for axis in 0..3 {
                            j[axis] += w * v[axis];
                        }
                    }
                }
                j
            })
            .collect()
    }
}

/// A posed mesh sharing topology and UVs with its model.
#[derive(Debug, Clone, PartialEq)]
pub struct BodyMesh {
    pub vertices: Vec<Vec3>,
    pub faces: Vec<[u32; 3]>,
    pub uv_coords: Vec<[[f64; 2]; 3]>,
}

/// Axis-angle to rotation matrix.
pub fn rodrigues(axis_angle: Vec3) -> Mat3 {
    let [x, y, z] = axis_angle;
    let angle = (x * x + y * y + z * z).sqrt();
    let skew = [[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]];
    let skew2 = mat_mul(&skew, &skew);
    // Below 1e-8 the second-order series is exact to machine precision.
    let (a, b) = if angle < 1e-8 {
        (1.0, 0.5)
    } else {
        (angle.sin() / angle, (1.0 - angle.cos()) / (angle * angle))
    };
    let mut r = [[0.0; 3]; 3];
    for i in 0..3 {
        for k in 0..3 {
            r[i][k] = if i == k { 1.0 } else { 0.0 } + a * skew[i][k] + b * skew2[i][k];
        }
    }
    r
}

pub(crate) fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for k in 0..3 {
            out[i][k] = a[i][0] * b[0][k] + a[i][1] * b[1][k] + a[i][2] * b[2][k];
        }
    }
    out
}

pub(crate) fn mat_vec(a: &Mat3, v: &Vec3) -> Vec3 {
    [
        a[0][0] * v[0] + a[0][1] * v[1] + a[0][2] * v[2],
        a[1][0] * v[0] + a[1][1] * v[1] + a[1][2] * v[2],
        a[2][0] * v[0] + a[2][1] * v[1] + a[2][2] * v[2],
    ]
}

#[derive(Clone, Copy)]
struct Rigid {
    rot: Mat3,
    trans: Vec3,
}

/// Poses the model: shape blending, forward kinematics, then skinning
/// and translation.
pub fn pose_mesh(
    spec: &BodyModelSpec,
    beta: &ShapeParams,
    theta: &PoseParams,
    gamma: &Translation,
) -> Result<BodyMesh> {
    let n = spec.vertex_count();
    if spec.skin_weights.len() != n || spec.shape_dirs.len() != n {
        return Err(Error::param("model per-vertex arrays disagree with vertex count"));
    }
    if spec.joint_tree.len() != NUM_JOINTS || spec.joint_regressor.len() != NUM_JOINTS {
        return Err(Error::param("model joint arrays do not have 24 entries"));
    }
    let order = spec.joint_order().ok_or_else(|| Error::param("joint tree is cyclic"))?;

    let shaped = spec.shaped_vertices(beta);
    let joints = spec.regress_joints(&shaped);

    // Each joint keeps its global rotation and the displacement of its pivot
    // from the rest position. A vertex moves by the skin-weighted sum of
    // (R_j - I)(x - j_rest) + d_j, so the zero pose leaves it bit-identical.
    let mut global = [Rigid {
        rot: [[0.0; 3]; 3],
        trans: [0.0; 3],
    }; NUM_JOINTS];
    for &j in &order {
        let rot = rodrigues(theta.joint(j));
        global[j] = match spec.joint_tree[j] {
            None => Rigid { rot, trans: [0.0; 3] },
            Some(p) => {
                let parent = global[p];
                let local = sub(&joints[j], &joints[p]);
                Rigid {
                    rot: mat_mul(&parent.rot, &rot),
                    trans: add(&parent.trans, &mat_vec(&minus_identity(&parent.rot), &local)),
                }
            }
        };
    }
    let deltas: Vec<Mat3> = global.iter().map(|g| minus_identity(&g.rot)).collect();

    let offset = gamma.as_array();
    let vertices = shaped
        .iter()
        .zip(&spec.skin_weights)
        .map(|(v, weights)| {
            let mut shift = [0.0; 3];
            for (j, &w) in weights.iter().enumerate() {
                if w == 0.0 {
                    continue;
                }
                let p = mat_vec(&deltas[j], &sub(v, &joints[j]));
                for axis in 0..3 {
                    shift[axis] += w * (p[axis] + global[j].trans[axis]);
                }
            }
            add(&add(v, &shift), &offset)
        })
        .collect();

    Ok(BodyMesh {
        vertices,
        faces: spec.faces.clone(),
        uv_coords: spec.uv_coords.clone(),
    })
}

fn minus_identity(r: &Mat3) -> Mat3 {
    let mut d = *r;
    for (i, row) in d.iter_mut().enumerate() {
        row[i] -= 1.0;
    }
    d
}

fn add(a: &Vec3, b: &Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

fn sub(a: &Vec3, b: &Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}
