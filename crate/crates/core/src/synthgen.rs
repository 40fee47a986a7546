//! Procedural articulated-figure dataset generator and its on-disk format.
//!
//! A creature is a kinematic tree of joints. A pose draws one discrete
//! pose mode plus per-joint articulation angles and a global similarity
//! (rotation/translation/scale); forward kinematics places all keypoints,
//! which are centered and, for 3D creatures, projected weak-perspective
//! (drop z, keep it as depth). The figure is rasterized as colored
//! strokes with per-keypoint marker dots over a noisy background, painter
//! ordered by depth, optionally covered by a random occluder rectangle.
//!
//! Every pose parameter is quantized to the on-disk float precision at
//! draw time, so recomputing keypoints from a stored pose reproduces the
//! stored ground truth exactly up to that same quantization.

use std::fmt::Write as _;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::diffcore::Tensor;
use crate::geom::{seg_eval, Part, Skeleton};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid creature spec: {what}")]
    BadSpec { what: String },
    #[error("figure left the frame in {attempts} consecutive pose draws")]
    OutOfFrame { attempts: usize },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {what}")]
    Format { path: String, what: String },
    #[error(transparent)]
    Geom(#[from] crate::geom::GeomError),
    #[error(transparent)]
    Diff(#[from] crate::diffcore::DiffError),
}

fn bad_spec(what: impl Into<String>) -> SynthError {
    SynthError::BadSpec { what: what.into() }
}

fn io_err(path: &Path, source: std::io::Error) -> SynthError {
    SynthError::Io { path: path.display().to_string(), source }
}

fn format_err(path: &Path, what: impl Into<String>) -> SynthError {
    SynthError::Format { path: path.display().to_string(), what: what.into() }
}

/// On-disk float formatting: decimal scientific with 9 significant digits.
pub fn fmt_f(x: f64) -> String {
    format!("{x:.8e}")
}

/// Rounds to the exact value that [`fmt_f`] stores.
pub fn quantize(x: f64) -> f64 {
    fmt_f(x).parse().expect("formatted float always parses")
}

/// One joint of the kinematic tree. Joints must be listed so that every
/// parent precedes its children; the root has `parent == None` and sits at
/// the origin of the canonical frame.
#[derive(Debug, Clone)]
pub struct Joint {
    pub parent: Option<usize>,
    /// Canonical offset from the parent joint (bone vector incl. length).
    pub offset: [f64; 3],
    /// Max articulation angle (radians) around the rest configuration.
    pub swing: f64,
}

/// A discrete pose family: a base articulation the random swing perturbs.
#[derive(Debug, Clone)]
pub struct PoseMode {
    pub prob: f64,
    /// Per-joint base rotation (radians, about z) defining the stance.
    pub joint_offsets: Vec<f64>,
}

/// Procedural creature description; see module docs for the sampling model.
#[derive(Debug, Clone)]
pub struct CreatureSpec {
    pub name: String,
    pub skeleton: Skeleton,
    pub joints: Vec<Joint>,
    pub modes: Vec<PoseMode>,
    /// Max |global rotation| per axis (2D creatures use only z).
    pub global_rot: f64,
    /// Max |global translation| per image axis (normalized units).
    pub global_trans: f64,
    pub scale_range: (f64, f64),
    /// 3D flag: articulate out of plane and keep per-keypoint depth.
    pub is_3d: bool,
    pub occluder_prob: f64,
    /// Occluder rectangle half-size range (normalized units).
    pub occluder_size: (f64, f64),
    /// Stroke half-width of rendered bones (normalized units).
    pub stroke_width: f64,
    /// Background noise amplitude in [0,1].
    pub noise: f64,
    pub image_size: usize,
    /// Manifest normalization pair for NME (two keypoint indices).
    pub norm_pair: (usize, usize),
}

impl CreatureSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        let k = self.skeleton.num_keypoints;
        self.skeleton.validate().map_err(|e| bad_spec(format!("skeleton: {e}")))?;
        if self.joints.len() != k {
            return Err(bad_spec(format!("{} joints for {k} keypoints", self.joints.len())));
        }
        let mut roots = 0;
        for (j, joint) in self.joints.iter().enumerate() {
            match joint.parent {
                None => roots += 1,
                Some(p) if p >= k => {
                    return Err(bad_spec(format!("joint {j} parent {p} out of range")))
                }
                Some(_) => {}
            }
            if !joint.swing.is_finite() || joint.swing < 0.0 {
                return Err(bad_spec(format!("joint {j} swing {} invalid", joint.swing)));
            }
            // Walking up the parent chain must terminate at the root.
            let mut cur = joint.parent;
            for _ in 0..k {
                match cur {
                    None => break,
                    Some(p) => cur = self.joints[p].parent,
                }
            }
            if cur.is_some() {
                return Err(bad_spec(format!("joint {j} sits on a parent cycle")));
            }
        }
        if roots != 1 {
            return Err(bad_spec(format!("expected exactly 1 root joint, found {roots}")));
        }
        if self.modes.is_empty() {
            return Err(bad_spec("at least one pose mode required"));
        }
        let mut total = 0.0;
        for (m, mode) in self.modes.iter().enumerate() {
            if !(mode.prob >= 0.0) {
                return Err(bad_spec(format!("mode {m} probability {}", mode.prob)));
            }
            if mode.joint_offsets.len() != k {
                return Err(bad_spec(format!("mode {m} needs {k} joint offsets")));
            }
            total += mode.prob;
        }
        if (total - 1.0).abs() > 1e-9 {
            return Err(bad_spec(format!("mode probabilities sum to {total}, need 1")));
        }
        if !(self.scale_range.0 > 0.0 && self.scale_range.1 >= self.scale_range.0) {
            return Err(bad_spec(format!("scale range {:?}", self.scale_range)));
        }
        if !(0.0..=1.0).contains(&self.occluder_prob) {
            return Err(bad_spec(format!("occluder probability {}", self.occluder_prob)));
        }
        if self.image_size < 8 || self.image_size % 2 != 0 {
            return Err(bad_spec(format!("image size {} (need even, >= 8)", self.image_size)));
        }
        if self.norm_pair.0 >= k || self.norm_pair.1 >= k || self.norm_pair.0 == self.norm_pair.1
        {
            return Err(bad_spec(format!("normalization pair {:?}", self.norm_pair)));
        }
        Ok(())
    }

    /// Canonical text used for the manifest spec hash.
    pub fn canonical_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "creature v1 {}", self.name);
        for j in &self.joints {
            let _ = writeln!(
                s,
                "joint {} {} {} {} {}",
                j.parent.map(|p| p as i64).unwrap_or(-1),
                fmt_f(j.offset[0]),
                fmt_f(j.offset[1]),
                fmt_f(j.offset[2]),
                fmt_f(j.swing)
            );
        }
        for m in &self.modes {
            let offs: Vec<String> = m.joint_offsets.iter().map(|&o| fmt_f(o)).collect();
            let _ = writeln!(s, "mode {} {}", fmt_f(m.prob), offs.join(" "));
        }
        let _ = writeln!(
            s,
            "globals {} {} {} {} {} {} {} {} {} {}",
            fmt_f(self.global_rot),
            fmt_f(self.global_trans),
            fmt_f(self.scale_range.0),
            fmt_f(self.scale_range.1),
            self.is_3d as u8,
            fmt_f(self.occluder_prob),
            fmt_f(self.occluder_size.0),
            fmt_f(self.occluder_size.1),
            fmt_f(self.stroke_width),
            fmt_f(self.noise)
        );
        let _ = writeln!(s, "image_size {}", self.image_size);
        let _ = writeln!(s, "norm_pair {} {}", self.norm_pair.0, self.norm_pair.1);
        s.push_str(&self.skeleton.to_text());
        s
    }

    pub fn spec_hash(&self) -> String {
        hex(&Sha256::digest(self.canonical_text().as_bytes()))
    }
}

fn hex(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        let _ = write!(s, "{b:02x}");
    }
    s
}

/// All random choices behind one sample's geometry, quantized to storage
/// precision so the pose round-trips through text exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct Pose {
    pub mode: usize,
    pub joint_a: Vec<f64>,
    pub joint_b: Vec<f64>,
    pub rot: [f64; 3],
    pub trans: [f64; 2],
    pub scale: f64,
}

fn rot_z(a: f64) -> [[f64; 3]; 3] {
    let (s, c) = a.sin_cos();
    [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]
}

fn rot_y(a: f64) -> [[f64; 3]; 3] {
    let (s, c) = a.sin_cos();
    [[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]]
}

fn rot_x(a: f64) -> [[f64; 3]; 3] {
    let (s, c) = a.sin_cos();
    [[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]]
}

fn mat_mul(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            for (l, bl) in b.iter().enumerate() {
                out[i][j] += a[i][l] * bl[j];
            }
        }
    }
    out
}

fn mat_vec(a: &[[f64; 3]; 3], v: [f64; 3]) -> [f64; 3] {
    [
        a[0][0] * v[0] + a[0][1] * v[1] + a[0][2] * v[2],
        a[1][0] * v[0] + a[1][1] * v[1] + a[1][2] * v[2],
        a[2][0] * v[0] + a[2][1] * v[1] + a[2][2] * v[2],
    ]
}

/// Draws one pose. The draw order is fixed (mode, per-joint a then b,
/// rotation, translation, scale) and every parameter is quantized.
pub fn draw_pose(spec: &CreatureSpec, rng: &mut impl Rng) -> Pose {
    let u: f64 = rng.gen();
    let mut mode = spec.modes.len() - 1;
    let mut acc = 0.0;
    for (m, pm) in spec.modes.iter().enumerate() {
        acc += pm.prob;
        if u < acc {
            mode = m;
            break;
        }
    }
    let k = spec.joints.len();
    let mut joint_a = Vec::with_capacity(k);
    let mut joint_b = Vec::with_capacity(k);
    for j in 0..k {
        let base = spec.modes[mode].joint_offsets[j];
        let swing = spec.joints[j].swing;
        joint_a.push(quantize(base + swing * (rng.gen::<f64>() * 2.0 - 1.0)));
        let b = if spec.is_3d { swing * (rng.gen::<f64>() * 2.0 - 1.0) } else { 0.0 };
        joint_b.push(quantize(b));
    }
    let mut rot = [0.0; 3];
    rot[2] = quantize(spec.global_rot * (rng.gen::<f64>() * 2.0 - 1.0));
    if spec.is_3d {
        rot[1] = quantize(spec.global_rot * (rng.gen::<f64>() * 2.0 - 1.0));
        rot[0] = quantize(spec.global_rot * (rng.gen::<f64>() * 2.0 - 1.0));
    }
    let trans = [
        quantize(spec.global_trans * (rng.gen::<f64>() * 2.0 - 1.0)),
        quantize(spec.global_trans * (rng.gen::<f64>() * 2.0 - 1.0)),
    ];
    let (lo, hi) = spec.scale_range;
    let scale = quantize(lo + (hi - lo) * rng.gen::<f64>());
    Pose { mode, joint_a, joint_b, rot, trans, scale }
}

/// Forward kinematics + centering + global similarity + weak-perspective
/// projection. Returns normalized image points and per-keypoint depth
/// (depth is all zeros for 2D creatures).
pub fn pose_points(spec: &CreatureSpec, pose: &Pose) -> (Vec<[f64; 2]>, Vec<f64>) {
    let k = spec.joints.len();
    let mut pos = vec![[0.0f64; 3]; k];
    let mut rot = vec![[[0.0f64; 3]; 3]; k];
    let mut done = vec![false; k];
    // Resolve joints parents-first; keypoint numbering is arbitrary.
    while done.iter().any(|d| !d) {
        for j in 0..k {
            if done[j] {
                continue;
            }
            let joint = &spec.joints[j];
            let local = mat_mul(&rot_z(pose.joint_a[j]), &rot_y(pose.joint_b[j]));
            match joint.parent {
                None => {
                    pos[j] = [0.0; 3];
                    rot[j] = local;
                }
                Some(p) if done[p] => {
                    rot[j] = mat_mul(&rot[p], &local);
                    let world_off = mat_vec(&rot[j], joint.offset);
                    pos[j] = [
                        pos[p][0] + world_off[0],
                        pos[p][1] + world_off[1],
                        pos[p][2] + world_off[2],
                    ];
                }
                Some(_) => continue,
            }
            done[j] = true;
        }
    }
    let mut centroid = [0.0; 3];
    for p in &pos {
        for ax in 0..3 {
            centroid[ax] += p[ax] / k as f64;
        }
    }
    let g = mat_mul(&rot_z(pose.rot[2]), &mat_mul(&rot_y(pose.rot[1]), &rot_x(pose.rot[0])));
    let mut points = Vec::with_capacity(k);
    let mut depth = Vec::with_capacity(k);
    for p in &pos {
        let c = [p[0] - centroid[0], p[1] - centroid[1], p[2] - centroid[2]];
        let r = mat_vec(&g, c);
        points.push([
            pose.scale * r[0] + pose.trans[0],
            pose.scale * r[1] + pose.trans[1],
        ]);
        depth.push(pose.scale * r[2]);
    }
    (points, depth)
}

/// One generated sample: the rasterized image plus exact ground truth.
#[derive(Debug, Clone)]
pub struct Sample {
    /// `[3, S, S]` image in [0,1], already quantized to 8-bit levels so it
    /// matches the PNG round trip bit for bit.
    pub image: Tensor,
    pub gt_points: Vec<[f64; 2]>,
    pub gt_depth: Option<Vec<f64>>,
    pub annotated: Vec<bool>,
    pub visible: Vec<bool>,
    pub pose: Pose,
}

/// Margin from the frame edge every keypoint must respect.
const FRAME_MARGIN: f64 = 0.95;
/// Depth margin for the self-occlusion z-test (normalized units).
const OCCLUSION_DEPTH_MARGIN: f64 = 0.02;
const MAX_POSE_ATTEMPTS: usize = 100;

/// Fixed bright marker palette; keypoint k uses entry k mod 12.
const PALETTE: [[f64; 3]; 12] = [
    [1.00, 0.35, 0.25],
    [0.30, 0.95, 0.35],
    [0.35, 0.55, 1.00],
    [1.00, 0.90, 0.25],
    [0.95, 0.40, 0.95],
    [0.35, 0.95, 0.95],
    [1.00, 0.65, 0.30],
    [0.70, 0.95, 0.40],
    [0.60, 0.45, 1.00],
    [0.95, 0.75, 0.75],
    [0.55, 0.80, 0.70],
    [0.90, 0.90, 0.90],
];

struct Raster<'a> {
    size: usize,
    data: &'a mut [f64],
}

impl Raster<'_> {
    fn composite(&mut self, row: usize, col: usize, cov: f64, color: [f64; 3]) {
        let hw = self.size * self.size;
        let idx = row * self.size + col;
        for (c, col_v) in color.iter().enumerate() {
            let v = &mut self.data[c * hw + idx];
            *v = cov * col_v + (1.0 - cov) * *v;
        }
    }

    /// Paints a thick segment with one-pixel antialiasing.
    fn stroke_segment(&mut self, a: [f64; 2], b: [f64; 2], width: f64, color: [f64; 3]) {
        let s = self.size;
        let px = 2.0 / s as f64;
        let pad = width + px;
        let (xmin, xmax) = (a[0].min(b[0]) - pad, a[0].max(b[0]) + pad);
        let (ymin, ymax) = (a[1].min(b[1]) - pad, a[1].max(b[1]) + pad);
        let col_of = |x: f64| (((x + 1.0) * s as f64 - 1.0) / 2.0).round() as i64;
        let row_of = |y: f64| (((y + 1.0) * s as f64 - 1.0) / 2.0).round() as i64;
        let c0 = col_of(xmin).max(0) as usize;
        let c1 = (col_of(xmax).min(s as i64 - 1)).max(0) as usize;
        let r0 = row_of(ymin).max(0) as usize;
        let r1 = (row_of(ymax).min(s as i64 - 1)).max(0) as usize;
        for row in r0..=r1 {
            let y = (2.0 * row as f64 + 1.0) / s as f64 - 1.0;
            for col in c0..=c1 {
                let x = (2.0 * col as f64 + 1.0) / s as f64 - 1.0;
                let ev = seg_eval([x, y], a, b);
                let cov = ((width - ev.d) / px + 0.5).clamp(0.0, 1.0);
                if cov > 0.0 {
                    self.composite(row, col, cov, color);
                }
            }
        }
    }

    fn stroke_dot(&mut self, p: [f64; 2], radius: f64, color: [f64; 3]) {
        self.stroke_segment(p, p, radius, color);
    }

    fn fill_rect(&mut self, center: [f64; 2], half: [f64; 2], color: [f64; 3]) {
        let s = self.size;
        for row in 0..s {
            let y = (2.0 * row as f64 + 1.0) / s as f64 - 1.0;
            if (y - center[1]).abs() > half[1] {
                continue;
            }
            for col in 0..s {
                let x = (2.0 * col as f64 + 1.0) / s as f64 - 1.0;
                if (x - center[0]).abs() <= half[0] {
                    self.composite(row, col, 1.0, color);
                }
            }
        }
    }
}

/// Generates one sample as a pure function of `(spec, seed)`.
pub fn generate_sample(spec: &CreatureSpec, seed: u64) -> Result<Sample, SynthError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = spec.skeleton.num_keypoints;

    // Pose, rejected until the whole figure is inside the frame.
    let mut chosen = None;
    for _ in 0..MAX_POSE_ATTEMPTS {
        let pose = draw_pose(spec, &mut rng);
        let (points, depth) = pose_points(spec, &pose);
        if points.iter().all(|p| p[0].abs() <= FRAME_MARGIN && p[1].abs() <= FRAME_MARGIN) {
            chosen = Some((pose, points, depth));
            break;
        }
    }
    let (pose, raw_points, depth) =
        chosen.ok_or(SynthError::OutOfFrame { attempts: MAX_POSE_ATTEMPTS })?;
    // Ground truth is stored quantized; the quantized values are the truth.
    let gt_points: Vec<[f64; 2]> =
        raw_points.iter().map(|p| [quantize(p[0]), quantize(p[1])]).collect();
    let gt_depth: Vec<f64> = depth.iter().map(|&d| quantize(d)).collect();

    // Appearance draws, in fixed order.
    let tint: [f64; 3] = [
        0.7 + 0.3 * rng.gen::<f64>(),
        0.7 + 0.3 * rng.gen::<f64>(),
        0.7 + 0.3 * rng.gen::<f64>(),
    ];
    let stroke: [f64; 3] = [
        0.65 + 0.35 * rng.gen::<f64>(),
        0.65 + 0.35 * rng.gen::<f64>(),
        0.65 + 0.35 * rng.gen::<f64>(),
    ];

    let s = spec.image_size;
    let mut data = vec![0.0f64; 3 * s * s];
    {
        let hw = s * s;
        for i in 0..hw {
            let u: f64 = rng.gen();
            for (c, t) in tint.iter().enumerate() {
                data[c * hw + i] = (0.08 + spec.noise * u) * t;
            }
        }
    }

    // Painter order: far elements first. 2D creatures keep list order.
    let mut raster = Raster { size: s, data: &mut data };
    #[derive(Clone, Copy)]
    enum Elem {
        Edge(usize, usize),
        Dot(usize),
    }
    let mut elems: Vec<(f64, usize, Elem)> = Vec::new();
    for (i, &(a, b)) in spec.skeleton.edges.iter().enumerate() {
        let d = 0.5 * (gt_depth[a] + gt_depth[b]);
        elems.push((d, i, Elem::Edge(a, b)));
    }
    for kp in 0..k {
        elems.push((gt_depth[kp], spec.skeleton.edges.len() + kp, Elem::Dot(kp)));
    }
    if spec.is_3d {
        elems.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    }
    for (_, _, e) in &elems {
        match *e {
            Elem::Edge(a, b) => raster.stroke_segment(
                gt_points[a],
                gt_points[b],
                spec.stroke_width,
                stroke,
            ),
            Elem::Dot(kp) => raster.stroke_dot(
                gt_points[kp],
                spec.stroke_width * 1.5,
                PALETTE[kp % PALETTE.len()],
            ),
        }
    }

    // Self-occlusion: a keypoint hidden behind a nearer bone it does not
    // belong to (z-test within a stroke width of the projected segment).
    let mut visible = vec![true; k];
    if spec.is_3d {
        for kp in 0..k {
            for &(a, b) in &spec.skeleton.edges {
                if kp == a || kp == b {
                    continue;
                }
                let ev = seg_eval(gt_points[kp], gt_points[a], gt_points[b]);
                if ev.d < spec.stroke_width {
                    let z = (1.0 - ev.t) * gt_depth[a] + ev.t * gt_depth[b];
                    if z < gt_depth[kp] - OCCLUSION_DEPTH_MARGIN {
                        visible[kp] = false;
                        break;
                    }
                }
            }
        }
    }

    // Occluder rectangle, always drawn last (nearest).
    let occ: f64 = rng.gen();
    if occ < spec.occluder_prob {
        let cx = 1.5 * (rng.gen::<f64>() - 0.5);
        let cy = 1.5 * (rng.gen::<f64>() - 0.5);
        let (lo, hi) = spec.occluder_size;
        let hx = lo + (hi - lo) * rng.gen::<f64>();
        let hy = lo + (hi - lo) * rng.gen::<f64>();
        let shade = 0.25 + 0.2 * rng.gen::<f64>();
        raster.fill_rect([cx, cy], [hx, hy], [shade, shade, shade * 1.1]);
        for kp in 0..k {
            let p = gt_points[kp];
            if (p[0] - cx).abs() <= hx && (p[1] - cy).abs() <= hy {
                visible[kp] = false;
            }
        }
    }

    // Quantize to the 8-bit levels PNG storage will produce.
    for v in data.iter_mut() {
        *v = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0;
    }

    Ok(Sample {
        image: Tensor::new(vec![3, s, s], data)?,
        gt_points,
        gt_depth: if spec.is_3d { Some(gt_depth) } else { None },
        annotated: vec![true; k],
        visible,
        pose,
    })
}

// ---------------------------------------------------------------------
// On-disk dataset format
// ---------------------------------------------------------------------

/// Parsed `manifest` file.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetMeta {
    pub name: String,
    pub spec_hash: String,
    pub image_size: usize,
    pub keypoints: usize,
    pub is_3d: bool,
    pub norm_pair: (usize, usize),
    pub seed: u64,
    pub splits: Vec<(String, usize)>,
    pub digest: String,
}

/// One annotation record.
#[derive(Debug, Clone)]
pub struct Record {
    pub index: usize,
    pub split: String,
    pub mode: usize,
    pub points: Vec<[f64; 2]>,
    pub depth: Option<Vec<f64>>,
    pub annotated: Vec<bool>,
    pub visible: Vec<bool>,
    pub pose: Pose,
}

/// A loaded dataset; images stay on disk and are read on demand.
#[derive(Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub meta: DatasetMeta,
    pub skeleton: Skeleton,
    pub records: Vec<Record>,
}

impl Dataset {
    /// Global indices of one split, in file order.
    pub fn split_indices(&self, split: &str) -> Vec<usize> {
        self.records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.split == split)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn image_path(&self, index: usize) -> PathBuf {
        self.root.join("images").join(format!("{index:06}.png"))
    }

    /// Reads one image as a `[3,S,S]` tensor in [0,1].
    pub fn load_image(&self, index: usize) -> Result<Tensor, SynthError> {
        let path = self.image_path(index);
        let img = image::open(&path)
            .map_err(|e| format_err(&path, format!("cannot decode: {e}")))?
            .to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        if w != self.meta.image_size || h != self.meta.image_size {
            return Err(format_err(
                &path,
                format!("image is {w}x{h}, manifest says {}", self.meta.image_size),
            ));
        }
        let hw = h * w;
        let mut data = vec![0.0f64; 3 * hw];
        for (i, px) in img.pixels().enumerate() {
            for c in 0..3 {
                data[c * hw + i] = px.0[c] as f64 / 255.0;
            }
        }
        Ok(Tensor::new(vec![3, h, w], data)?)
    }
}

fn write_flags(out: &mut String, label: &str, flags: &[bool]) {
    let _ = write!(out, "{label}");
    for &f in flags {
        let _ = write!(out, " {}", f as u8);
    }
    out.push('\n');
}

fn record_text(rec: &Record, is_3d: bool) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "sample {}", rec.index);
    let _ = writeln!(s, "split {}", rec.split);
    let _ = writeln!(s, "mode {}", rec.mode);
    let pts: Vec<String> =
        rec.points.iter().flat_map(|p| [fmt_f(p[0]), fmt_f(p[1])]).collect();
    let _ = writeln!(s, "points {}", pts.join(" "));
    if is_3d {
        let depth = rec.depth.as_ref().expect("3D record carries depth");
        let ds: Vec<String> = depth.iter().map(|&d| fmt_f(d)).collect();
        let _ = writeln!(s, "depth {}", ds.join(" "));
    }
    write_flags(&mut s, "annotated", &rec.annotated);
    write_flags(&mut s, "visible", &rec.visible);
    let mut pose = vec![rec.pose.mode.to_string()];
    for j in 0..rec.pose.joint_a.len() {
        pose.push(fmt_f(rec.pose.joint_a[j]));
        pose.push(fmt_f(rec.pose.joint_b[j]));
    }
    for ax in 0..3 {
        pose.push(fmt_f(rec.pose.rot[ax]));
    }
    pose.push(fmt_f(rec.pose.trans[0]));
    pose.push(fmt_f(rec.pose.trans[1]));
    pose.push(fmt_f(rec.pose.scale));
    let _ = writeln!(s, "pose {}", pose.join(" "));
    let _ = writeln!(s, "end");
    s
}

fn encode_png(image: &Tensor, path: &Path) -> Result<Vec<u8>, SynthError> {
    let (h, w) = (image.shape[1], image.shape[2]);
    let hw = h * w;
    let mut raw = Vec::with_capacity(3 * hw);
    for i in 0..hw {
        for c in 0..3 {
            raw.push((image.data[c * hw + i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    let img = image::RgbImage::from_raw(w as u32, h as u32, raw.clone())
        .expect("raw buffer sized for the image");
    img.save(path).map_err(|e| {
        format_err(path, format!("cannot write PNG: {e}"))
    })?;
    Ok(raw)
}

/// Generates `splits` (name, count) sample groups into `out_dir`, writing
/// `manifest`, `skeleton`, `annotations.txt` and `images/NNNNNN.png`.
/// Sample `i` (global index across splits) uses seed `seed + i`.
pub fn generate_dataset(
    spec: &CreatureSpec,
    splits: &[(&str, usize)],
    seed: u64,
    out_dir: &Path,
) -> Result<DatasetMeta, SynthError> {
    spec.validate()?;
    if splits.is_empty() || splits.iter().all(|(_, n)| *n == 0) {
        return Err(bad_spec("dataset needs at least one non-empty split"));
    }
    let images_dir = out_dir.join("images");
    fs::create_dir_all(&images_dir).map_err(|e| io_err(&images_dir, e))?;

    let mut annotations = String::from("annotations v1\n");
    let total: usize = splits.iter().map(|(_, n)| n).sum();
    let _ = writeln!(annotations, "samples {total}");
    let mut digest = Sha256::new();
    let mut index = 0usize;
    for (split, count) in splits {
        for _ in 0..*count {
            let sample = generate_sample(spec, seed + index as u64)?;
            let rec = Record {
                index,
                split: split.to_string(),
                mode: sample.pose.mode,
                points: sample.gt_points.clone(),
                depth: sample.gt_depth.clone(),
                annotated: sample.annotated.clone(),
                visible: sample.visible.clone(),
                pose: sample.pose.clone(),
            };
            annotations.push_str(&record_text(&rec, spec.is_3d));
            let png_path = images_dir.join(format!("{index:06}.png"));
            let raw = encode_png(&sample.image, &png_path)?;
            digest.update(&raw);
            index += 1;
        }
    }
    let ann_path = out_dir.join("annotations.txt");
    fs::write(&ann_path, &annotations).map_err(|e| io_err(&ann_path, e))?;
    digest.update(annotations.as_bytes());

    let skel_path = out_dir.join("skeleton");
    spec.skeleton.save(&skel_path).map_err(|e| match e {
        crate::geom::GeomError::BadInput { what } => format_err(&skel_path, what),
        other => other.into(),
    })?;

    let meta = DatasetMeta {
        name: spec.name.clone(),
        spec_hash: spec.spec_hash(),
        image_size: spec.image_size,
        keypoints: spec.skeleton.num_keypoints,
        is_3d: spec.is_3d,
        norm_pair: spec.norm_pair,
        seed,
        splits: splits.iter().map(|(n, c)| (n.to_string(), *c)).collect(),
        digest: hex(&digest.finalize()),
    };
    let mut manifest = String::from("dataset v1\n");
    let _ = writeln!(manifest, "name {}", meta.name);
    let _ = writeln!(manifest, "spec_hash {}", meta.spec_hash);
    let _ = writeln!(manifest, "image_size {}", meta.image_size);
    let _ = writeln!(manifest, "keypoints {}", meta.keypoints);
    let _ = writeln!(manifest, "is_3d {}", meta.is_3d as u8);
    let _ = writeln!(manifest, "norm_pair {} {}", meta.norm_pair.0, meta.norm_pair.1);
    let _ = writeln!(manifest, "seed {}", meta.seed);
    for (name, count) in &meta.splits {
        let _ = writeln!(manifest, "split {name} {count}");
    }
    let _ = writeln!(manifest, "digest {}", meta.digest);
    let man_path = out_dir.join("manifest");
    fs::write(&man_path, manifest).map_err(|e| io_err(&man_path, e))?;
    Ok(meta)
}

struct LineReader<'a> {
    path: &'a Path,
    lines: std::iter::Enumerate<std::str::Lines<'a>>,
}

impl<'a> LineReader<'a> {
    fn next_line(&mut self) -> Option<(usize, &'a str)> {
        for (n, line) in self.lines.by_ref() {
            let t = line.trim();
            if !t.is_empty() && !t.starts_with('#') {
                return Some((n + 1, t));
            }
        }
        None
    }

    fn expect(&mut self, what: &str) -> Result<(usize, &'a str), SynthError> {
        self.next_line()
            .ok_or_else(|| format_err(self.path, format!("unexpected end of file, wanted {what}")))
    }
}

fn field<'a>(
    path: &Path,
    line: &'a str,
    key: &str,
    ctx: &str,
) -> Result<&'a str, SynthError> {
    line.strip_prefix(key)
        .and_then(|rest| {
            let r = rest.trim_start();
            if r.len() < rest.len() || r.is_empty() { Some(r) } else { None }
        })
        .ok_or_else(|| format_err(path, format!("{ctx}: expected field '{key}', got '{line}'")))
}

fn parse_floats(path: &Path, s: &str, n: usize, ctx: &str) -> Result<Vec<f64>, SynthError> {
    let vals: Result<Vec<f64>, _> = s.split_whitespace().map(str::parse).collect();
    let vals =
        vals.map_err(|e| format_err(path, format!("{ctx}: bad float ({e})")))?;
    if vals.len() != n {
        return Err(format_err(path, format!("{ctx}: expected {n} values, got {}", vals.len())));
    }
    Ok(vals)
}

fn parse_flags(path: &Path, s: &str, n: usize, ctx: &str) -> Result<Vec<bool>, SynthError> {
    let flags: Result<Vec<bool>, SynthError> = s
        .split_whitespace()
        .map(|t| match t {
            "0" => Ok(false),
            "1" => Ok(true),
            other => Err(format_err(path, format!("{ctx}: flag must be 0/1, got '{other}'"))),
        })
        .collect();
    let flags = flags?;
    if flags.len() != n {
        return Err(format_err(path, format!("{ctx}: expected {n} flags, got {}", flags.len())));
    }
    Ok(flags)
}

fn parse_manifest(path: &Path, text: &str) -> Result<DatasetMeta, SynthError> {
    let mut r = LineReader { path, lines: text.lines().enumerate() };
    let (_, header) = r.expect("header")?;
    if header != "dataset v1" {
        return Err(format_err(path, format!("expected 'dataset v1' header, got '{header}'")));
    }
    let mut name = None;
    let mut spec_hash = None;
    let mut image_size = None;
    let mut keypoints = None;
    let mut is_3d = None;
    let mut norm_pair = None;
    let mut seed = None;
    let mut splits = Vec::new();
    let mut digest = None;
    while let Some((ln, line)) = r.next_line() {
        let ctx = format!("manifest line {ln}");
        let (key, rest) = line.split_once(char::is_whitespace).unwrap_or((line, ""));
        let rest = rest.trim();
        match key {
            "name" => name = Some(rest.to_string()),
            "spec_hash" => spec_hash = Some(rest.to_string()),
            "image_size" => {
                image_size = Some(rest.parse().map_err(|e| {
                    format_err(path, format!("{ctx}: image_size: {e}"))
                })?)
            }
            "keypoints" => {
                keypoints = Some(rest.parse().map_err(|e| {
                    format_err(path, format!("{ctx}: keypoints: {e}"))
                })?)
            }
            "is_3d" => {
                is_3d = Some(match rest {
                    "0" => false,
                    "1" => true,
                    other => {
                        return Err(format_err(
                            path,
                            format!("{ctx}: is_3d must be 0/1, got '{other}'"),
                        ))
                    }
                })
            }
            "norm_pair" => {
                let parts: Vec<&str> = rest.split_whitespace().collect();
                if parts.len() != 2 {
                    return Err(format_err(path, format!("{ctx}: norm_pair needs 2 indices")));
                }
                let a = parts[0]
                    .parse()
                    .map_err(|e| format_err(path, format!("{ctx}: norm_pair: {e}")))?;
                let b = parts[1]
                    .parse()
                    .map_err(|e| format_err(path, format!("{ctx}: norm_pair: {e}")))?;
                norm_pair = Some((a, b));
            }
            "seed" => {
                seed = Some(
                    rest.parse().map_err(|e| format_err(path, format!("{ctx}: seed: {e}")))?,
                )
            }
            "split" => {
                let (sname, count) = rest
                    .split_once(char::is_whitespace)
                    .ok_or_else(|| format_err(path, format!("{ctx}: split needs name+count")))?;
                let count = count
                    .trim()
                    .parse()
                    .map_err(|e| format_err(path, format!("{ctx}: split count: {e}")))?;
                splits.push((sname.to_string(), count));
            }
            "digest" => digest = Some(rest.to_string()),
            other => {
                return Err(format_err(path, format!("{ctx}: unknown manifest field '{other}'")))
            }
        }
    }
    let missing = |f: &str| format_err(path, format!("manifest is missing field '{f}'"));
    Ok(DatasetMeta {
        name: name.ok_or_else(|| missing("name"))?,
        spec_hash: spec_hash.ok_or_else(|| missing("spec_hash"))?,
        image_size: image_size.ok_or_else(|| missing("image_size"))?,
        keypoints: keypoints.ok_or_else(|| missing("keypoints"))?,
        is_3d: is_3d.ok_or_else(|| missing("is_3d"))?,
        norm_pair: norm_pair.ok_or_else(|| missing("norm_pair"))?,
        seed: seed.ok_or_else(|| missing("seed"))?,
        splits,
        digest: digest.ok_or_else(|| missing("digest"))?,
    })
}

fn parse_records(
    path: &Path,
    text: &str,
    meta: &DatasetMeta,
) -> Result<Vec<Record>, SynthError> {
    let k = meta.keypoints;
    let mut r = LineReader { path, lines: text.lines().enumerate() };
    let (_, header) = r.expect("header")?;
    if header != "annotations v1" {
        return Err(format_err(path, format!("expected 'annotations v1' header, got '{header}'")));
    }
    let (_, sline) = r.expect("samples count")?;
    let total: usize = field(path, sline, "samples", "header")?
        .parse()
        .map_err(|e| format_err(path, format!("samples count: {e}")))?;
    let mut records = Vec::with_capacity(total);
    for idx in 0..total {
        let ctx = format!("sample {idx}");
        let (_, line) = r.expect("sample header")?;
        let declared: usize = field(path, line, "sample", &ctx)?
            .parse()
            .map_err(|e| format_err(path, format!("{ctx}: index: {e}")))?;
        if declared != idx {
            return Err(format_err(path, format!("{ctx}: header says index {declared}")));
        }
        let (_, line) = r.expect("split")?;
        let split = field(path, line, "split", &ctx)?.to_string();
        if !meta.splits.iter().any(|(n, _)| *n == split) {
            return Err(format_err(path, format!("{ctx}: unknown split '{split}'")));
        }
        let (_, line) = r.expect("mode")?;
        let mode: usize = field(path, line, "mode", &ctx)?
            .parse()
            .map_err(|e| format_err(path, format!("{ctx}: mode: {e}")))?;
        let (_, line) = r.expect("points")?;
        let pvals = parse_floats(path, field(path, line, "points", &ctx)?, 2 * k, &ctx)?;
        let points: Vec<[f64; 2]> = pvals.chunks(2).map(|c| [c[0], c[1]]).collect();
        for (kp, p) in points.iter().enumerate() {
            if p[0].abs() > 1.0 + 1e-9 || p[1].abs() > 1.0 + 1e-9 {
                return Err(format_err(
                    path,
                    format!("{ctx}: field 'points': keypoint {kp} at {p:?} outside [-1,1]"),
                ));
            }
        }
        let depth = if meta.is_3d {
            let (_, line) = r.expect("depth")?;
            Some(parse_floats(path, field(path, line, "depth", &ctx)?, k, &ctx)?)
        } else {
            None
        };
        let (_, line) = r.expect("annotated")?;
        let annotated = parse_flags(path, field(path, line, "annotated", &ctx)?, k, &ctx)?;
        let (_, line) = r.expect("visible")?;
        let visible = parse_flags(path, field(path, line, "visible", &ctx)?, k, &ctx)?;
        let (_, line) = r.expect("pose")?;
        let ptoks: Vec<&str> = field(path, line, "pose", &ctx)?.split_whitespace().collect();
        let want = 1 + 2 * k + 3 + 2 + 1;
        if ptoks.len() != want {
            return Err(format_err(
                path,
                format!("{ctx}: field 'pose': expected {want} values, got {}", ptoks.len()),
            ));
        }
        let pmode: usize = ptoks[0]
            .parse()
            .map_err(|e| format_err(path, format!("{ctx}: pose mode: {e}")))?;
        if pmode != mode {
            return Err(format_err(path, format!("{ctx}: pose mode {pmode} != mode {mode}")));
        }
        let nums: Result<Vec<f64>, _> = ptoks[1..].iter().map(|t| t.parse()).collect();
        let nums =
            nums.map_err(|e| format_err(path, format!("{ctx}: pose float: {e}")))?;
        let mut joint_a = Vec::with_capacity(k);
        let mut joint_b = Vec::with_capacity(k);
        for j in 0..k {
            joint_a.push(nums[2 * j]);
            joint_b.push(nums[2 * j + 1]);
        }
        let base = 2 * k;
        let pose = Pose {
            mode: pmode,
            joint_a,
            joint_b,
            rot: [nums[base], nums[base + 1], nums[base + 2]],
            trans: [nums[base + 3], nums[base + 4]],
            scale: nums[base + 5],
        };
        let (_, line) = r.expect("end")?;
        if line != "end" {
            return Err(format_err(path, format!("{ctx}: expected 'end', got '{line}'")));
        }
        records.push(Record { index: idx, split, mode, points, depth, annotated, visible, pose });
    }
    Ok(records)
}

/// Loads manifest, skeleton and annotations. Images are not touched, so a
/// dataset with no `images/` directory still loads for metrics-only use.
pub fn load_dataset(root: &Path) -> Result<Dataset, SynthError> {
    let man_path = root.join("manifest");
    let mut text = String::new();
    fs::File::open(&man_path)
        .and_then(|mut f| f.read_to_string(&mut text))
        .map_err(|e| io_err(&man_path, e))?;
    let meta = parse_manifest(&man_path, &text)?;

    let skel_path = root.join("skeleton");
    let skeleton = Skeleton::load(&skel_path)?;
    if skeleton.num_keypoints != meta.keypoints {
        return Err(format_err(
            &skel_path,
            format!(
                "skeleton has {} keypoints, manifest says {}",
                skeleton.num_keypoints, meta.keypoints
            ),
        ));
    }

    let ann_path = root.join("annotations.txt");
    let mut ann = String::new();
    fs::File::open(&ann_path)
        .and_then(|mut f| f.read_to_string(&mut ann))
        .map_err(|e| io_err(&ann_path, e))?;
    let records = parse_records(&ann_path, &ann, &meta)?;
    let declared: usize = meta.splits.iter().map(|(_, n)| n).sum();
    if records.len() != declared {
        return Err(format_err(
            &ann_path,
            format!("{} records but manifest declares {declared}", records.len()),
        ));
    }
    Ok(Dataset { root: root.to_path_buf(), meta, skeleton, records })
}

// ---------------------------------------------------------------------
// Stock creatures
// ---------------------------------------------------------------------

/// 2D stick biped: 8 keypoints, two parts, left/right flip symmetry.
/// Keypoints: 0 head, 1 neck, 2 left hand, 3 right hand, 7 spine,
/// 4 pelvis, 5 left foot, 6 right foot.
pub fn biped_2d() -> CreatureSpec {
    let skeleton = Skeleton {
        num_keypoints: 8,
        names: vec![
            "head".into(),
            "neck".into(),
            "lhand".into(),
            "rhand".into(),
            "pelvis".into(),
            "lfoot".into(),
            "rfoot".into(),
            "spine".into(),
        ],
        edges: vec![(0, 1), (1, 7), (7, 4), (1, 2), (1, 3), (4, 5), (4, 6)],
        parts: vec![
            Part { name: "upper".into(), members: vec![0, 1, 2, 3, 7] },
            Part { name: "lower".into(), members: vec![4, 5, 6] },
        ],
        flip_perm: vec![0, 1, 3, 2, 4, 6, 5, 7],
        whole_part_weight: 0.1,
        chains: vec![vec![0, 1, 7, 4]],
    };
    let joints = vec![
        Joint { parent: Some(1), offset: [0.0, -0.28, 0.0], swing: 0.25 }, // head
        Joint { parent: None, offset: [0.0, 0.0, 0.0], swing: 0.0 },      // neck (root)
        Joint { parent: Some(1), offset: [-0.34, 0.10, 0.0], swing: 0.45 }, // lhand
        Joint { parent: Some(1), offset: [0.34, 0.10, 0.0], swing: 0.45 }, // rhand
        Joint { parent: Some(7), offset: [0.0, 0.30, 0.0], swing: 0.10 }, // pelvis
        Joint { parent: Some(4), offset: [-0.16, 0.38, 0.0], swing: 0.40 }, // lfoot
        Joint { parent: Some(4), offset: [0.16, 0.38, 0.0], swing: 0.40 }, // rfoot
        Joint { parent: Some(1), offset: [0.0, 0.30, 0.0], swing: 0.12 }, // spine
    ];
    CreatureSpec {
        name: "biped-2d".into(),
        skeleton,
        joints,
        modes: vec![PoseMode { prob: 1.0, joint_offsets: vec![0.0; 8] }],
        global_rot: 0.35,
        global_trans: 0.12,
        scale_range: (0.75, 1.05),
        is_3d: false,
        occluder_prob: 0.3,
        occluder_size: (0.08, 0.22),
        stroke_width: 0.045,
        noise: 0.20,
        image_size: 64,
        norm_pair: (0, 1),
    }
}

/// 3D stick quadruped: 12 keypoints, 4 parts, posed in 3D and projected
/// weak-perspective with per-keypoint depth. Keypoints: 0 head, 1 neck,
/// 2 hip, 3 tail, 4/5 front-left knee/foot, 6/7 front-right, 8/9
/// back-left, 10/11 back-right.
pub fn quad_3d() -> CreatureSpec {
    let skeleton = Skeleton {
        num_keypoints: 12,
        names: vec![
            "head".into(),
            "neck".into(),
            "hip".into(),
            "tail".into(),
            "fl_knee".into(),
            "fl_foot".into(),
            "fr_knee".into(),
            "fr_foot".into(),
            "bl_knee".into(),
            "bl_foot".into(),
            "br_knee".into(),
            "br_foot".into(),
        ],
        edges: vec![
            (0, 1),
            (1, 2),
            (2, 3),
            (1, 4),
            (4, 5),
            (1, 6),
            (6, 7),
            (2, 8),
            (8, 9),
            (2, 10),
            (10, 11),
        ],
        parts: vec![
            Part { name: "spine".into(), members: vec![0, 1, 2, 3] },
            Part { name: "front".into(), members: vec![1, 4, 5, 6, 7] },
            Part { name: "rear".into(), members: vec![2, 8, 9, 10, 11] },
            Part { name: "legs".into(), members: vec![4, 5, 6, 7, 8, 9, 10, 11] },
        ],
        flip_perm: vec![0, 1, 2, 3, 6, 7, 4, 5, 10, 11, 8, 9],
        whole_part_weight: 0.1,
        chains: vec![vec![0, 1, 2, 3]],
    };
    let joints = vec![
        Joint { parent: Some(1), offset: [-0.30, -0.12, 0.0], swing: 0.30 }, // head
        Joint { parent: None, offset: [0.0, 0.0, 0.0], swing: 0.0 },         // neck (root)
        Joint { parent: Some(1), offset: [0.55, 0.0, 0.0], swing: 0.10 },    // hip
        Joint { parent: Some(2), offset: [0.25, -0.08, 0.0], swing: 0.40 },  // tail
        Joint { parent: Some(1), offset: [-0.05, 0.20, 0.12], swing: 0.30 }, // fl knee
        Joint { parent: Some(4), offset: [0.02, 0.20, 0.0], swing: 0.30 },   // fl foot
        Joint { parent: Some(1), offset: [-0.05, 0.20, -0.12], swing: 0.30 }, // fr knee
        Joint { parent: Some(6), offset: [0.02, 0.20, 0.0], swing: 0.30 },   // fr foot
        Joint { parent: Some(2), offset: [0.05, 0.20, 0.12], swing: 0.30 },  // bl knee
        Joint { parent: Some(8), offset: [-0.02, 0.20, 0.0], swing: 0.30 },  // bl foot
        Joint { parent: Some(2), offset: [0.05, 0.20, -0.12], swing: 0.30 }, // br knee
        Joint { parent: Some(10), offset: [-0.02, 0.20, 0.0], swing: 0.30 }, // br foot
    ];
    CreatureSpec {
        name: "quad-3d".into(),
        skeleton,
        joints,
        modes: vec![PoseMode { prob: 1.0, joint_offsets: vec![0.0; 12] }],
        global_rot: 0.5,
        global_trans: 0.10,
        scale_range: (0.70, 1.00),
        is_3d: true,
        occluder_prob: 0.25,
        occluder_size: (0.08, 0.20),
        stroke_width: 0.045,
        noise: 0.20,
        image_size: 64,
        norm_pair: (0, 1),
    }
}

/// Biped with four well-separated articulated pose modes at skewed
/// frequencies, for shot-selection experiments: stand, arms-up, crouch,
/// lean.
pub fn biped_modes() -> CreatureSpec {
    let mut spec = biped_2d();
    spec.name = "biped-modes".into();
    // Joint order: head neck lhand rhand pelvis lfoot rfoot spine.
    let stand = vec![0.0; 8];
    let arms_up = vec![0.0, 0.0, 1.9, -1.9, 0.0, 0.0, 0.0, 0.0];
    let crouch = vec![0.6, 0.0, 0.7, -0.7, 0.0, 1.1, -1.1, 0.35];
    let lean = vec![-0.5, 0.0, -0.9, -0.9, 0.0, -0.55, -0.55, -0.65];
    spec.modes = vec![
        PoseMode { prob: 0.58, joint_offsets: stand },
        PoseMode { prob: 0.24, joint_offsets: arms_up },
        PoseMode { prob: 0.11, joint_offsets: crouch },
        PoseMode { prob: 0.07, joint_offsets: lean },
    ];
    // Tighter global variation so image features cluster by pose mode.
    spec.global_rot = 0.12;
    spec.global_trans = 0.06;
    spec.scale_range = (0.85, 1.0);
    spec.occluder_prob = 0.0;
    spec
}

/// Looks up a stock creature by its dataset name.
pub fn spec_by_name(name: &str) -> Option<CreatureSpec> {
    match name {
        "biped-2d" => Some(biped_2d()),
        "quad-3d" => Some(quad_3d()),
        "biped-modes" => Some(biped_modes()),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn stock_specs_validate() {
        for name in ["biped-2d", "quad-3d", "biped-modes"] {
            spec_by_name(name).unwrap().validate().unwrap();
        }
        assert!(spec_by_name("nope").is_none());
    }

    #[test]
    fn same_spec_and_seed_is_bitwise_identical() {
        let spec = biped_2d();
        let a = generate_sample(&spec, 17).unwrap();
        let b = generate_sample(&spec, 17).unwrap();
        assert_eq!(a.image.data, b.image.data);
        assert_eq!(a.gt_points, b.gt_points);
        assert_eq!(a.visible, b.visible);
        assert_eq!(a.pose, b.pose);
    }

    #[test]
    fn occluder_probability_zero_keeps_everything_visible() {
        let mut spec = biped_2d();
        spec.occluder_prob = 0.0;
        for seed in 0..20 {
            let s = generate_sample(&spec, seed).unwrap();
            assert!(s.visible.iter().all(|&v| v), "seed {seed}");
        }
    }

    #[test]
    fn figures_stay_in_frame_across_many_seeds() {
        for (name, n) in [("biped-2d", 300), ("quad-3d", 200), ("biped-modes", 300)] {
            let spec = spec_by_name(name).unwrap();
            for seed in 0..n {
                let s = generate_sample(&spec, seed).unwrap();
                for p in &s.gt_points {
                    assert!(p[0].abs() <= 1.0 && p[1].abs() <= 1.0, "{name} seed {seed}");
                }
            }
        }
    }

    #[test]
    fn pose_text_round_trip_reprojects_ground_truth() {
        let spec = quad_3d();
        for seed in 0..30 {
            let s = generate_sample(&spec, seed).unwrap();
            let rec = Record {
                index: 0,
                split: "train".into(),
                mode: s.pose.mode,
                points: s.gt_points.clone(),
                depth: s.gt_depth.clone(),
                annotated: s.annotated.clone(),
                visible: s.visible.clone(),
                pose: s.pose.clone(),
            };
            // Round-trip the record through its text form.
            let text = format!("annotations v1\nsamples 1\n{}", record_text(&rec, true));
            let meta = DatasetMeta {
                name: spec.name.clone(),
                spec_hash: spec.spec_hash(),
                image_size: spec.image_size,
                keypoints: 12,
                is_3d: true,
                norm_pair: (0, 1),
                seed: 0,
                splits: vec![("train".into(), 1)],
                digest: String::new(),
            };
            let parsed = parse_records(Path::new("mem"), &text, &meta).unwrap();
            let (points, depth) = pose_points(&spec, &parsed[0].pose);
            for kp in 0..12 {
                assert!(
                    (points[kp][0] - parsed[0].points[kp][0]).abs() <= 1e-9
                        && (points[kp][1] - parsed[0].points[kp][1]).abs() <= 1e-9,
                    "seed {seed} keypoint {kp}"
                );
                let d = parsed[0].depth.as_ref().unwrap()[kp];
                assert!((depth[kp] - d).abs() <= 1e-9, "depth seed {seed} keypoint {kp}");
            }
        }
    }

    #[test]
    fn quad_has_self_occlusions_but_biped_does_not() {
        let mut quad = quad_3d();
        quad.occluder_prob = 0.0;
        let mut saw_invisible = false;
        for seed in 0..100 {
            let s = generate_sample(&quad, seed).unwrap();
            saw_invisible |= s.visible.iter().any(|&v| !v);
        }
        assert!(saw_invisible, "a posed quadruped should sometimes hide a keypoint");
    }

    #[test]
    fn occluder_hides_covered_keypoints() {
        let mut spec = biped_2d();
        spec.occluder_prob = 1.0;
        spec.occluder_size = (0.5, 0.5); // huge: always covers something
        let mut hidden = 0;
        for seed in 0..20 {
            let s = generate_sample(&spec, seed).unwrap();
            hidden += s.visible.iter().filter(|&&v| !v).count();
        }
        assert!(hidden > 0);
    }

    #[test]
    fn image_values_are_8bit_levels() {
        let s = generate_sample(&biped_2d(), 3).unwrap();
        for &v in &s.image.data {
            let lv = v * 255.0;
            assert!((lv - lv.round()).abs() < 1e-9);
            assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn dataset_layout_and_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = biped_2d();
        let meta =
            generate_dataset(&spec, &[("train", 6), ("val", 2), ("test", 2)], 5, dir.path())
                .unwrap();
        assert!(dir.path().join("manifest").is_file());
        assert!(dir.path().join("skeleton").is_file());
        assert!(dir.path().join("annotations.txt").is_file());
        for i in 0..10 {
            assert!(dir.path().join(format!("images/{i:06}.png")).is_file(), "image {i}");
        }
        let ds = load_dataset(dir.path()).unwrap();
        assert_eq!(ds.meta, meta);
        assert_eq!(ds.records.len(), 10);
        assert_eq!(ds.split_indices("train"), vec![0, 1, 2, 3, 4, 5]);
        assert_eq!(ds.split_indices("test"), vec![8, 9]);
        // Stored points equal the generated (already quantized) points.
        let s0 = generate_sample(&spec, 5).unwrap();
        assert_eq!(ds.records[0].points, s0.gt_points);
        // PNG round trip reproduces the in-memory image bit for bit.
        let img = ds.load_image(0).unwrap();
        assert_eq!(img.data, s0.image.data);
    }

    #[test]
    fn regeneration_reproduces_the_manifest_exactly() {
        let spec = biped_2d();
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        generate_dataset(&spec, &[("train", 4)], 11, d1.path()).unwrap();
        generate_dataset(&spec, &[("train", 4)], 11, d2.path()).unwrap();
        let m1 = fs::read(d1.path().join("manifest")).unwrap();
        let m2 = fs::read(d2.path().join("manifest")).unwrap();
        assert_eq!(m1, m2);
        let a1 = fs::read(d1.path().join("annotations.txt")).unwrap();
        let a2 = fs::read(d2.path().join("annotations.txt")).unwrap();
        assert_eq!(a1, a2);
    }

    #[test]
    fn disjoint_seeds_produce_distinct_images() {
        let spec = biped_2d();
        let mut hashes = HashSet::new();
        for seed in 0..200 {
            let s = generate_sample(&spec, seed).unwrap();
            let mut h = Sha256::new();
            for &v in &s.image.data {
                h.update(v.to_bits().to_le_bytes());
            }
            assert!(hashes.insert(hex(&h.finalize())), "duplicate image at seed {seed}");
        }
    }

    #[test]
    fn metrics_only_loading_works_without_images() {
        let dir = tempfile::tempdir().unwrap();
        generate_dataset(&biped_2d(), &[("test", 3)], 2, dir.path()).unwrap();
        fs::remove_dir_all(dir.path().join("images")).unwrap();
        let ds = load_dataset(dir.path()).unwrap();
        assert_eq!(ds.records.len(), 3);
        assert!(ds.load_image(0).is_err(), "image access must fail loudly");
    }

    #[test]
    fn truncated_annotations_are_a_corruption_error() {
        let dir = tempfile::tempdir().unwrap();
        generate_dataset(&biped_2d(), &[("train", 3)], 2, dir.path()).unwrap();
        let ann_path = dir.path().join("annotations.txt");
        let text = fs::read_to_string(&ann_path).unwrap();
        let cut = text.len() * 2 / 3;
        fs::write(&ann_path, &text[..cut]).unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("annotations.txt"), "error should carry the path: {msg}");
    }

    #[test]
    fn schema_errors_name_field_and_sample() {
        let dir = tempfile::tempdir().unwrap();
        generate_dataset(&biped_2d(), &[("train", 2)], 2, dir.path()).unwrap();
        let ann_path = dir.path().join("annotations.txt");
        let text = fs::read_to_string(&ann_path).unwrap();
        // Corrupt sample 1's visible line.
        let corrupted = text.replacen("visible", "visibäle", 2);
        let corrupted = corrupted.replacen("visibäle", "visible", 1);
        fs::write(&ann_path, corrupted).unwrap();
        let err = load_dataset(dir.path()).unwrap_err().to_string();
        assert!(err.contains("sample 1") && err.contains("visible"), "{err}");
    }

    #[test]
    fn manifest_missing_field_is_named() {
        let dir = tempfile::tempdir().unwrap();
        generate_dataset(&biped_2d(), &[("train", 1)], 2, dir.path()).unwrap();
        let man = dir.path().join("manifest");
        let text = fs::read_to_string(&man).unwrap();
        let stripped: String =
            text.lines().filter(|l| !l.starts_with("norm_pair")).collect::<Vec<_>>().join("\n");
        fs::write(&man, stripped).unwrap();
        let err = load_dataset(dir.path()).unwrap_err().to_string();
        assert!(err.contains("norm_pair"), "{err}");
    }

    #[test]
    fn pose_distribution_matches_spec_ranges() {
        let spec = biped_modes();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let n = 10_000;
        let mut mode_counts = vec![0usize; spec.modes.len()];
        let mut scale_below_mid = 0usize;
        let mut head_below_base = 0usize;
        for _ in 0..n {
            let pose = draw_pose(&spec, &mut rng);
            mode_counts[pose.mode] += 1;
            let mid = 0.5 * (spec.scale_range.0 + spec.scale_range.1);
            if pose.scale < mid {
                scale_below_mid += 1;
            }
            let base = spec.modes[pose.mode].joint_offsets[0];
            if pose.joint_a[0] < base {
                head_below_base += 1;
            }
        }
        for (m, pm) in spec.modes.iter().enumerate() {
            let freq = mode_counts[m] as f64 / n as f64;
            assert!(
                (freq - pm.prob).abs() <= 0.02,
                "mode {m}: frequency {freq} vs probability {}",
                pm.prob
            );
        }
        let frac = scale_below_mid as f64 / n as f64;
        assert!((frac - 0.5).abs() <= 0.02, "scale midpoint fraction {frac}");
        let frac = head_below_base as f64 / n as f64;
        assert!((frac - 0.5).abs() <= 0.02, "head swing midpoint fraction {frac}");
    }

    #[test]
    fn pose_modes_are_recorded_per_sample() {
        let dir = tempfile::tempdir().unwrap();
        generate_dataset(&biped_modes(), &[("train", 40)], 1, dir.path()).unwrap();
        let ds = load_dataset(dir.path()).unwrap();
        let modes: HashSet<usize> = ds.records.iter().map(|r| r.mode).collect();
        assert!(modes.len() >= 2, "40 draws should hit multiple modes, got {modes:?}");
    }
}
