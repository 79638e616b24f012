//! Procedural low-polygon mannequin with the 24-joint layout, used where a
//! licensed body asset is unavailable.
//!
//! Limbs and torso are capped tubes, the head is a UV sphere. Every part
//! owns a rectangle of the UV atlas; caps live in small cells of a shared
//! strip. [`region_at`] exposes the layout so texture generators can paint
//! parts semantically.

use super::{BodyModelSpec, Vec3, NUM_JOINTS, NUM_SHAPE_COEFFS};
use crate::grid::Mask;

pub const DESK_JOINT_NAMES: [&str; NUM_JOINTS] = [
    "pelvis",
    "left_hip",
    "right_hip",
    "spine1",
    "left_knee",
    "right_knee",
    "spine2",
    "left_ankle",
    "right_ankle",
    "spine3",
    "left_foot",
    "right_foot",
    "neck",
    "left_collar",
    "right_collar",
    "head",
    "left_shoulder",
    "right_shoulder",
    "left_elbow",
    "right_elbow",
    "left_wrist",
    "right_wrist",
    "left_hand",
    "right_hand",
];

const PARENTS: [Option<usize>; NUM_JOINTS] = [
    None,
    Some(0),
    Some(0),
    Some(0),
    Some(1),
    Some(2),
    Some(3),
    Some(4),
    Some(5),
    Some(6),
    Some(7),
    Some(8),
    Some(9),
    Some(9),
    Some(9),
    Some(12),
    Some(13),
    Some(14),
    Some(16),
    Some(17),
    Some(18),
    Some(19),
    Some(20),
    Some(21),
];

const FACE_HAND_MASK_SIZE: usize = 64;

/// Semantic part owning a point of the desk atlas.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AtlasRegion {
    Head,
    Hand,
    Torso,
    UpperArm,
    Forearm,
    Thigh,
    Shin,
    Foot,
    Unused,
}

#[derive(Clone, Copy)]
struct Rect {
    u0: f64,
    v0: f64,
    u1: f64,
    v1: f64,
}

impl Rect {
    const fn new(u0: f64, v0: f64, u1: f64, v1: f64) -> Self {
        Self { u0, v0, u1, v1 }
    }

    fn inset(&self, margin: f64) -> Rect {
        Rect::new(self.u0 + margin, self.v0 + margin, self.u1 - margin, self.v1 - margin)
    }

    fn at(&self, s: f64, t: f64) -> [f64; 2] {
        [self.u0 + s * (self.u1 - self.u0), self.v0 + t * (self.v1 - self.v0)]
    }

    fn contains(&self, u: f64, v: f64) -> bool {
        u >= self.u0 && u < self.u1 && v >= self.v0 && v < self.v1
    }

    fn local(&self, u: f64, v: f64) -> (f64, f64) {
        ((u - self.u0) / (self.u1 - self.u0), (v - self.v0) / (self.v1 - self.v0))
    }
}

const UV_MARGIN: f64 = 0.008;
const HEAD_RECT: Rect = Rect::new(0.0, 0.0, 0.25, 0.25);
const CAP_STRIP: Rect = Rect::new(0.5, 0.75, 1.0, 1.0);
const CAP_COLS: usize = 8;

/// Tubes in build order; cap cells follow this order, two per tube.
const TUBES: [(AtlasRegion, Rect); 13] = [
    (AtlasRegion::Torso, Rect::new(0.5, 0.0, 1.0, 0.5)),
    (AtlasRegion::UpperArm, Rect::new(0.0, 0.25, 0.125, 0.5)),
    (AtlasRegion::UpperArm, Rect::new(0.125, 0.25, 0.25, 0.5)),
    (AtlasRegion::Forearm, Rect::new(0.25, 0.25, 0.375, 0.5)),
    (AtlasRegion::Forearm, Rect::new(0.375, 0.25, 0.5, 0.5)),
    (AtlasRegion::Hand, Rect::new(0.25, 0.0, 0.375, 0.25)),
    (AtlasRegion::Hand, Rect::new(0.375, 0.0, 0.5, 0.25)),
    (AtlasRegion::Thigh, Rect::new(0.0, 0.5, 0.25, 0.75)),
    (AtlasRegion::Thigh, Rect::new(0.25, 0.5, 0.5, 0.75)),
    (AtlasRegion::Shin, Rect::new(0.0, 0.75, 0.25, 1.0)),
    (AtlasRegion::Shin, Rect::new(0.25, 0.75, 0.5, 1.0)),
    (AtlasRegion::Foot, Rect::new(0.5, 0.5, 0.625, 0.75)),
    (AtlasRegion::Foot, Rect::new(0.625, 0.5, 0.75, 0.75)),
];

fn cap_cell(index: usize) -> Rect {
    let w = (CAP_STRIP.u1 - CAP_STRIP.u0) / CAP_COLS as f64;
    let (col, row) = (index % CAP_COLS, index / CAP_COLS);
    Rect::new(
        CAP_STRIP.u0 + col as f64 * w,
        CAP_STRIP.v0 + row as f64 * w,
        CAP_STRIP.u0 + (col + 1) as f64 * w,
        CAP_STRIP.v0 + (row + 1) as f64 * w,
    )
}

/// Region of the desk atlas at `(u, v)` plus local coordinates inside the
/// part rectangle (`s` around the part, `t` along it).
pub fn region_at(u: f64, v: f64) -> (AtlasRegion, f64, f64) {
    if HEAD_RECT.contains(u, v) {
        let (s, t) = HEAD_RECT.local(u, v);
        return (AtlasRegion::Head, s, t);
    }
    for (region, rect) in TUBES {
        if rect.contains(u, v) {
            let (s, t) = rect.local(u, v);
            return (region, s, t);
        }
    }
    for cap in 0..2 * TUBES.len() {
        let cell = cap_cell(cap);
        if cell.contains(u, v) {
            let t = if cap % 2 == 0 { 0.0 } else { 1.0 };
            return (TUBES[cap / 2].0, 0.5, t);
        }
    }
    (AtlasRegion::Unused, 0.0, 0.0)
}

#[derive(Clone, Copy, PartialEq)]
enum Part {
    Torso,
    Head,
    Arm { side: f64 },
    Leg { side: f64 },
}

struct Builder {
    vertices: Vec<Vec3>,
    weights: Vec<[f64; NUM_JOINTS]>,
    shape_dirs: Vec<[[f64; NUM_SHAPE_COEFFS]; 3]>,
    faces: Vec<[u32; 3]>,
    uvs: Vec<[[f64; 2]; 3]>,
    /// Per joint: (vertex ring, coefficient) pairs averaged into the regressor.
    joint_sources: Vec<Vec<(Vec<usize>, f64)>>,
}

struct TubeSpec<'a> {
    start: Vec3,
    end: Vec3,
    /// (front-back, side) radii at the start and the end.
    radii_start: (f64, f64),
    radii_end: (f64, f64),
    stations: Vec<f64>,
    tube_index: usize,
    part: Part,
    weights: &'a dyn Fn(Vec3, f64) -> Vec<(usize, f64)>,
}

fn add3(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

fn sub3(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn scale3(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

fn dot3(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross3(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn normalize3(a: Vec3) -> Vec3 {
    let n = dot3(a, a).sqrt();
    scale3(a, 1.0 / n)
}

/// Deterministic linear shape directions for a vertex.
fn shape_offsets(part: Part, pos: Vec3, radial: Vec3, axis_origin: Vec3) -> [[f64; NUM_SHAPE_COEFFS]; 3] {
    let mut d = [[0.0; NUM_SHAPE_COEFFS]; 3];
    // 0: overall height about the pelvis.
    d[1][0] = 0.08 * pos[1];
    // 1: girth, radial growth away from the part axis.
    for axis in 0..3 {
        d[axis][1] = 0.15 * radial[axis];
    }
    match part {
        Part::Arm { side } => {
            // 2: shoulder width; 4: arm length.
            d[0][2] = 0.03 * side;
            let along = sub3(pos, axis_origin);
            for axis in 0..3 {
                d[axis][4] = 0.08 * along[axis];
            }
        }
        Part::Leg { .. } => {
            // 3: leg length.
            d[1][3] = 0.1 * (pos[1] - 0.05).max(0.0);
        }
        Part::Torso => {
            // 5: belly, pushing the front surface forward.
            let front = (-radial[2]).max(0.0);
            let bump = (-((pos[1] + 0.1) / 0.12).powi(2)).exp();
            d[2][5] = -0.4 * front * bump;
        }
        Part::Head => {
            // 6: head size about the head centre.
            let rel = sub3(pos, axis_origin);
            for axis in 0..3 {
                d[axis][6] = 0.1 * rel[axis];
            }
        }
    }
    // 7..9: small smooth asymmetries.
    d[0][7] = 0.01 * (7.0 * pos[0] + 3.0 * pos[1]).sin();
    d[2][8] = 0.01 * (5.0 * pos[1]).cos();
    d[1][9] = 0.01 * (4.0 * pos[0] - 6.0 * pos[2]).sin();
    d
}

impl Builder {
    fn new() -> Self {
        Self {
            vertices: Vec::new(),
            weights: Vec::new(),
            shape_dirs: Vec::new(),
            faces: Vec::new(),
            uvs: Vec::new(),
            joint_sources: vec![Vec::new(); NUM_JOINTS],
        }
    }

    fn vertex(&mut self, pos: Vec3, joints: &[(usize, f64)], dirs: [[f64; NUM_SHAPE_COEFFS]; 3]) -> usize {
        let mut w = [0.0; NUM_JOINTS];
        for &(j, v) in joints {
            w[j] += v;
        }
        let total: f64 = w.iter().sum();
        for v in w.iter_mut() {
            *v /= total;
        }
        self.vertices.push(pos);
        self.weights.push(w);
        self.shape_dirs.push(dirs);
        self.vertices.len() - 1
    }

    fn face(&mut self, idx: [usize; 3], uv: [[f64; 2]; 3]) {
        self.faces.push([idx[0] as u32, idx[1] as u32, idx[2] as u32]);
        self.uvs.push(uv);
    }

    /// Returns the vertex ring at every station.
    fn tube(&mut self, spec: TubeSpec<'_>, sides: usize) -> Vec<Vec<usize>> {
        let axis = normalize3(sub3(spec.end, spec.start));
        let reference = if axis[2].abs() < 0.8 {
            [0.0, 0.0, -1.0]
        } else {
            [0.0, -1.0, 0.0]
        };
        let front = normalize3(sub3(reference, scale3(axis, dot3(reference, axis))));
        let side = cross3(axis, front);
        let rect = TUBES[spec.tube_index].1.inset(UV_MARGIN);

        let mut rings = Vec::with_capacity(spec.stations.len());
        for &t in &spec.stations {
            let center = add3(spec.start, scale3(sub3(spec.end, spec.start), t));
            let rf = spec.radii_start.0 + t * (spec.radii_end.0 - spec.radii_start.0);
            let rs = spec.radii_start.1 + t * (spec.radii_end.1 - spec.radii_start.1);
            let mut ring = Vec::with_capacity(sides);
            for k in 0..sides {
                let phi = 2.0 * std::f64::consts::PI * k as f64 / sides as f64 - std::f64::consts::PI;
                let radial = add3(scale3(front, rf * phi.cos()), scale3(side, rs * phi.sin()));
                let pos = add3(center, radial);
                let joints = (spec.weights)(pos, t);
                let dirs = shape_offsets(spec.part, pos, radial, spec.start);
                ring.push(self.vertex(pos, &joints, dirs));
            }
            rings.push(ring);
        }

        for (r, pair) in rings.windows(2).enumerate() {
            let (t0, t1) = (spec.stations[r], spec.stations[r + 1]);
            for k in 0..sides {
                let k1 = (k + 1) % sides;
                let s0 = k as f64 / sides as f64;
                let s1 = (k + 1) as f64 / sides as f64;
                let (a, b, c, d) = (pair[0][k], pair[0][k1], pair[1][k], pair[1][k1]);
                self.face([a, b, d], [rect.at(s0, t0), rect.at(s1, t0), rect.at(s1, t1)]);
                self.face([a, d, c], [rect.at(s0, t0), rect.at(s1, t1), rect.at(s0, t1)]);
            }
        }

        for (end, ring, t) in [(0, &rings[0], 0.0), (1, &rings[rings.len() - 1], 1.0)] {
            let cell = cap_cell(2 * spec.tube_index + end).inset(UV_MARGIN);
            let center = if end == 0 { spec.start } else { spec.end };
            let joints = (spec.weights)(center, t);
            let dirs = shape_offsets(spec.part, center, [0.0; 3], spec.start);
            let c = self.vertex(center, &joints, dirs);
            let ring = ring.clone();
            let cap_uv = |k: usize| {
                let a = 2.0 * std::f64::consts::PI * k as f64 / sides as f64;
                cell.at(0.5 + 0.45 * a.cos(), 0.5 + 0.45 * a.sin())
            };
            for k in 0..sides {
                let k1 = (k + 1) % sides;
                self.face([c, ring[k], ring[k1]], [cell.at(0.5, 0.5), cap_uv(k), cap_uv(k + 1)]);
            }
        }
        rings
    }

    fn head(&mut self, center: Vec3, radii: Vec3, sides: usize, bands: usize) -> Vec<usize> {
        let rect = HEAD_RECT.inset(UV_MARGIN);
        let joints = [(15usize, 1.0)];
        let point = |polar: f64, phi: f64| -> (Vec3, Vec3) {
            let radial = [
                radii[0] * polar.sin() * phi.sin(),
                -radii[1] * polar.cos(),
                -radii[2] * polar.sin() * phi.cos(),
            ];
            (add3(center, radial), radial)
        };
        let mut all = Vec::new();
        let (top_pos, top_rad) = point(0.0, 0.0);
        let top = self.vertex(top_pos, &joints, shape_offsets(Part::Head, top_pos, top_rad, center));
        all.push(top);
        let mut rings = Vec::new();
        for b in 1..bands {
            let polar = std::f64::consts::PI * b as f64 / bands as f64;
            let mut ring = Vec::with_capacity(sides);
            for k in 0..sides {
                let phi = 2.0 * std::f64::consts::PI * k as f64 / sides as f64 - std::f64::consts::PI;
                let (pos, radial) = point(polar, phi);
                let v = self.vertex(pos, &joints, shape_offsets(Part::Head, pos, radial, center));
                ring.push(v);
                all.push(v);
            }
            rings.push(ring);
        }
        let (bot_pos, bot_rad) = point(std::f64::consts::PI, 0.0);
        let bottom = self.vertex(bot_pos, &joints, shape_offsets(Part::Head, bot_pos, bot_rad, center));
        all.push(bottom);

        let tv = |b: usize| b as f64 / bands as f64;
        let su = |k: usize| k as f64 / sides as f64;
        for k in 0..sides {
            let k1 = (k + 1) % sides;
            let mid = (su(k) + su(k + 1)) / 2.0;
            self.face(
                [top, rings[0][k1], rings[0][k]],
                [rect.at(mid, 0.0), rect.at(su(k + 1), tv(1)), rect.at(su(k), tv(1))],
            );
            let last = rings.len() - 1;
            self.face(
                [bottom, rings[last][k], rings[last][k1]],
                [
                    rect.at(mid, 1.0),
                    rect.at(su(k), tv(bands - 1)),
                    rect.at(su(k + 1), tv(bands - 1)),
                ],
            );
        }
        for b in 0..rings.len() - 1 {
            for k in 0..sides {
                let k1 = (k + 1) % sides;
                let (a, bb, c, d) = (rings[b][k], rings[b][k1], rings[b + 1][k], rings[b + 1][k1]);
                let (t0, t1) = (tv(b + 1), tv(b + 2));
                self.face(
                    [a, bb, d],
                    [rect.at(su(k), t0), rect.at(su(k + 1), t0), rect.at(su(k + 1), t1)],
                );
                self.face(
                    [a, d, c],
                    [rect.at(su(k), t0), rect.at(su(k + 1), t1), rect.at(su(k), t1)],
                );
            }
        }
        all
    }

    fn source(&mut self, joint: usize, ring: &[usize], coef: f64) {
        self.joint_sources[joint].push((ring.to_vec(), coef));
    }
}

/// Key stations plus `resolution - 1` evenly spaced stations between each.
fn refine(keys: &[f64], resolution: usize) -> (Vec<f64>, Vec<usize>) {
    let mut stations = vec![keys[0]];
    let mut key_index = vec![0];
    for pair in keys.windows(2) {
        for s in 1..=resolution {
            stations.push(pair[0] + (pair[1] - pair[0]) * s as f64 / resolution as f64);
        }
        key_index.push(stations.len() - 1);
    }
    (stations, key_index)
}

/// Weight for a limb bound to `joint`, blending into `parent` near its start.
fn limb_weights(joint: usize, parent: usize) -> impl Fn(Vec3, f64) -> Vec<(usize, f64)> {
    move |_, t| {
        let blend = 0.25;
        if t < blend {
            let wp = 0.5 * (1.0 - t / blend);
            vec![(joint, 1.0 - wp), (parent, wp)]
        } else {
            vec![(joint, 1.0)]
        }
    }
}

/// Builds the desk mannequin. Higher `resolution` adds rings and sides;
/// values below 1 are treated as 1.
pub fn make_desk_body(resolution: usize) -> BodyModelSpec {
    let res = resolution.max(1);
    let sides = 6 + 4 * res;
    let mut b = Builder::new();

    // Torso from the crotch (y = 0.08) up to the neck (y = -0.46).
    let torso_top = -0.46;
    let torso_bottom = 0.08;
    let spine: [(usize, f64); 5] = [(0, 0.0), (3, -0.10), (6, -0.22), (9, -0.34), (12, torso_top)];
    let to_t = |y: f64| (torso_bottom - y) / (torso_bottom - torso_top);
    let mut keys = vec![0.0];
    keys.extend(spine.iter().map(|&(_, y)| to_t(y)));
    let (stations, key_index) = refine(&keys, res);
    let torso_weights = move |pos: Vec3, _t: f64| -> Vec<(usize, f64)> {
        let y = pos[1];
        if y >= spine[0].1 {
            return vec![(0, 1.0)];
        }
        for pair in spine.windows(2) {
            let ((j0, y0), (j1, y1)) = (pair[0], pair[1]);
            if y <= y0 && y >= y1 {
                let f = (y0 - y) / (y0 - y1);
                return vec![(j0, 1.0 - f), (j1, f)];
            }
        }
        vec![(12, 1.0)]
    };
    let torso = b.tube(
        TubeSpec {
            start: [0.0, torso_bottom, 0.0],
            end: [0.0, torso_top, 0.0],
            radii_start: (0.095, 0.15),
            radii_end: (0.08, 0.13),
            stations,
            tube_index: 0,
            part: Part::Torso,
            weights: &torso_weights,
        },
        sides,
    );
    for (k, &(joint, _)) in spine.iter().enumerate() {
        b.source(joint, &torso[key_index[k + 1]], 1.0);
    }
    let neck_ring = torso[key_index[5]].clone();

    let head = b.head([0.0, -0.585, 0.0], [0.085, 0.11, 0.095], sides, 4 + 2 * res);
    b.source(15, &head, 1.0);

    let limb_stations = refine(&[0.0, 1.0], res + 1).0;
    for (side, sign) in [(0usize, 1.0f64), (1, -1.0)] {
        let x = |v: f64| v * sign;
        let (collar, shoulder, elbow, wrist, hand) = (13 + side, 16 + side, 18 + side, 20 + side, 22 + side);
        let (hip, knee, ankle, foot) = (1 + side, 4 + side, 7 + side, 10 + side);

        let upper = b.tube(
            TubeSpec {
                start: [x(0.185), -0.43, 0.0],
                end: [x(0.205), -0.17, 0.0],
                radii_start: (0.048, 0.048),
                radii_end: (0.04, 0.04),
                stations: limb_stations.clone(),
                tube_index: 1 + side,
                part: Part::Arm { side: sign },
                weights: &limb_weights(shoulder, collar),
            },
            sides,
        );
        b.source(shoulder, &upper[0], 1.0);
        b.source(elbow, upper.last().unwrap(), 1.0);
        b.source(collar, &upper[0], 0.5);
        b.source(collar, &neck_ring, 0.5);

        let fore = b.tube(
            TubeSpec {
                start: [x(0.205), -0.17, 0.0],
                end: [x(0.225), 0.07, 0.0],
                radii_start: (0.038, 0.038),
                radii_end: (0.032, 0.032),
                stations: limb_stations.clone(),
                tube_index: 3 + side,
                part: Part::Arm { side: sign },
                weights: &limb_weights(elbow, shoulder),
            },
            sides,
        );
        b.source(wrist, fore.last().unwrap(), 1.0);

        let palm = b.tube(
            TubeSpec {
                start: [x(0.225), 0.07, 0.0],
                end: [x(0.23), 0.16, 0.0],
                radii_start: (0.022, 0.035),
                radii_end: (0.018, 0.03),
                stations: limb_stations.clone(),
                tube_index: 5 + side,
                part: Part::Arm { side: sign },
                weights: &limb_weights(wrist, elbow),
            },
            sides,
        );
        b.source(hand, palm.last().unwrap(), 1.0);

        let thigh = b.tube(
            TubeSpec {
                start: [x(0.085), 0.04, 0.0],
                end: [x(0.09), 0.45, 0.0],
                radii_start: (0.07, 0.068),
                radii_end: (0.05, 0.05),
                stations: limb_stations.clone(),
                tube_index: 7 + side,
                part: Part::Leg { side: sign },
                weights: &limb_weights(hip, 0),
            },
            sides,
        );
        b.source(hip, &thigh[0], 1.0);
        b.source(knee, thigh.last().unwrap(), 1.0);

        let shin = b.tube(
            TubeSpec {
                start: [x(0.09), 0.45, 0.0],
                end: [x(0.09), 0.84, 0.0],
                radii_start: (0.048, 0.048),
                radii_end: (0.036, 0.036),
                stations: limb_stations.clone(),
                tube_index: 9 + side,
                part: Part::Leg { side: sign },
                weights: &limb_weights(knee, hip),
            },
            sides,
        );
        b.source(ankle, shin.last().unwrap(), 1.0);

        let foot_tube = b.tube(
            TubeSpec {
                start: [x(0.09), 0.865, 0.03],
                end: [x(0.095), 0.875, -0.13],
                radii_start: (0.03, 0.04),
                radii_end: (0.022, 0.035),
                stations: limb_stations.clone(),
                tube_index: 11 + side,
                part: Part::Leg { side: sign },
                weights: &limb_weights(ankle, knee),
            },
            sides,
        );
        b.source(foot, foot_tube.last().unwrap(), 1.0);
    }

    let n = b.vertices.len();
    let joint_regressor = b
        .joint_sources
        .iter()
        .map(|sources| {
            let mut row = vec![0.0; n];
            for (ring, coef) in sources {
                for &v in ring {
                    row[v] += coef / ring.len() as f64;
                }
            }
            row
        })
        .collect();

    let face_hand_mask = Mask::from_fn(FACE_HAND_MASK_SIZE, FACE_HAND_MASK_SIZE, |r, c| {
        let u = (c as f64 + 0.5) / FACE_HAND_MASK_SIZE as f64;
        let v = (r as f64 + 0.5) / FACE_HAND_MASK_SIZE as f64;
        matches!(region_at(u, v).0, AtlasRegion::Head | AtlasRegion::Hand)
    });

    BodyModelSpec {
        template_vertices: b.vertices,
        faces: b.faces,
        joint_tree: PARENTS.to_vec(),
        joint_regressor,
        skin_weights: b.weights,
        shape_dirs: b.shape_dirs,
        uv_coords: b.uvs,
        face_hand_mask,
    }
}
