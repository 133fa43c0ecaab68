//! Per-frame motion features, foot contacts, control signals and
//! normalization statistics.
//!
//! Feature layout for a skeleton with `J` joints (`J = 23` gives 276):
//!
//! | range            | content                                             |
//! |------------------|-----------------------------------------------------|
//! | 0                | yaw angular velocity, rad/frame                     |
//! | 1, 2             | root X/Z velocity in the previous frame's yaw frame |
//! | 3                | root height                                         |
//! | 4, 5             | root tilt (swing exp-map x, z)                      |
//! | 6 ..             | exp-maps of joints 1..J                             |
//! | then             | angular velocities log(q[n-1]⁻¹ q[n]) of joints 1..J |
//! | then             | root-relative positions of all J joints             |
//! | then             | root-relative velocities of all J joints            |
//!
//! Positions and velocities are expressed in the current frame's yaw frame.

use serde::{Deserialize, Serialize};

use crate::bvh::{Pose, RawClip};
use crate::error::{CoreError, Result};
use crate::rot::{
    expmap_to_quat, facing, from_yaw_tilt, quat_to_expmap, rotate_y, wrap_angle, yaw_tilt, Quat,
    Vec3,
};
use crate::skeleton::Skeleton;

pub const NUM_JOINTS: usize = 23;
pub const ROOT_DIM: usize = 6;
pub const FEATURE_DIM: usize = feature_dim(NUM_JOINTS);
pub const CONTACT_DIM: usize = 4;
/// Future sample offsets of the control signals, frames at 60 fps.
pub const CONTROL_OFFSETS: [usize; 6] = [10, 20, 30, 40, 50, 60];
pub const CONTROL_SAMPLES: usize = CONTROL_OFFSETS.len();
/// c_p followed by c_d.
pub const TRAJ_DIM: usize = 4 * CONTROL_SAMPLES;

pub const fn feature_dim(joints: usize) -> usize {
    ROOT_DIM + 6 * (joints - 1) + 6 * joints
}

/// Column offsets of the feature blocks for a given joint count.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    pub joints: usize,
}

impl Layout {
    pub const CANONICAL: Layout = Layout { joints: NUM_JOINTS };

    pub fn dim(self) -> usize {
        feature_dim(self.joints)
    }

    /// Exp-map of joint `j` (`j >= 1`).
    pub fn rot(self, j: usize) -> usize {
        ROOT_DIM + 3 * (j - 1)
    }

    pub fn angvel(self, j: usize) -> usize {
        ROOT_DIM + 3 * (self.joints - 1) + 3 * (j - 1)
    }

    pub fn pos(self, j: usize) -> usize {
        ROOT_DIM + 6 * (self.joints - 1) + 3 * j
    }

    pub fn vel(self, j: usize) -> usize {
        ROOT_DIM + 6 * (self.joints - 1) + 3 * self.joints + 3 * j
    }
}

/// Root transform on the ground plane plus height.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RootState {
    pub position: Vec3,
    pub yaw: f64,
}

impl RootState {
    pub fn of(pose: &Pose) -> Self {
        Self {
            position: pose.root_position,
            yaw: yaw_tilt(&pose.rotations[0]).0,
        }
    }
}

/// Geometry of one frame needed by several features.
struct FrameGeom {
    root: Vec3,
    yaw: f64,
    tilt: [f64; 2],
    positions: Vec<Vec3>,
}

impl FrameGeom {
    fn new(skel: &Skeleton, pose: &Pose) -> Self {
        let (yaw, tilt) = yaw_tilt(&pose.rotations[0]);
        Self {
            root: pose.root_position,
            yaw,
            tilt,
            positions: skel.fk_unchecked(&pose.rotations, &pose.root_position).0,
        }
    }

    fn local(&self, j: usize) -> Vec3 {
        rotate_y(-self.yaw, &(self.positions[j] - self.root))
    }
}

fn features_from(
    skel: &Skeleton,
    prev: &Pose,
    cur: &Pose,
    gp: &FrameGeom,
    gc: &FrameGeom,
) -> Vec<f64> {
    let lay = Layout { joints: skel.len() };
    let mut f = vec![0.0; lay.dim()];
    f[0] = wrap_angle(gc.yaw - gp.yaw);
    let v = rotate_y(-gp.yaw, &(gc.root - gp.root));
    f[1] = v.x;
    f[2] = v.z;
    f[3] = gc.root.y;
    f[4] = gc.tilt[0];
    f[5] = gc.tilt[1];
    for j in 1..skel.len() {
        let e = quat_to_expmap(&cur.rotations[j]);
        f[lay.rot(j)..lay.rot(j) + 3].copy_from_slice(e.as_slice());
        let d = quat_to_expmap(&(prev.rotations[j].inverse() * cur.rotations[j]));
        f[lay.angvel(j)..lay.angvel(j) + 3].copy_from_slice(d.as_slice());
    }
    for j in 0..skel.len() {
        let p = gc.local(j);
        f[lay.pos(j)..lay.pos(j) + 3].copy_from_slice(p.as_slice());
        let rel_c = gc.positions[j] - gc.root;
        let rel_p = gp.positions[j] - gp.root;
        let vel = rotate_y(-gc.yaw, &(rel_c - rel_p));
        f[lay.vel(j)..lay.vel(j) + 3].copy_from_slice(vel.as_slice());
    }
    f
}

/// Feature vector of frame `n` (needs frame `n - 1`).
pub fn extract_features(clip: &RawClip, n: usize) -> Result<Vec<f64>> {
    if n == 0 || n >= clip.len() {
        return Err(CoreError::Invalid(format!(
            "feature frame {n} needs a predecessor inside a clip of {}",
            clip.len()
        )));
    }
    let s = &clip.skeleton;
    let (prev, cur) = (&clip.frames[n - 1], &clip.frames[n]);
    Ok(features_from(
        s,
        prev,
        cur,
        &FrameGeom::new(s, prev),
        &FrameGeom::new(s, cur),
    ))
}

/// Advance `prev` by one feature frame: integrate the root block and take
/// joint rotations from the exp-maps.
pub fn apply_frame(prev: &Pose, f: &[f64]) -> Pose {
    let joints = prev.rotations.len();
    let lay = Layout { joints };
    let yaw_prev = yaw_tilt(&prev.rotations[0]).0;
    let step = rotate_y(yaw_prev, &Vec3::new(f[1], 0.0, f[2]));
    let root_position = Vec3::new(
        prev.root_position.x + step.x,
        f[3],
        prev.root_position.z + step.z,
    );
    let mut rotations = Vec::with_capacity(joints);
    rotations.push(from_yaw_tilt(yaw_prev + f[0], [f[4], f[5]]));
    for j in 1..joints {
        let o = lay.rot(j);
        rotations.push(expmap_to_quat(&Vec3::new(f[o], f[o + 1], f[o + 2])));
    }
    Pose {
        root_position,
        rotations,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContactThresholds {
    /// Max world height of a foot joint in contact, cm.
    pub foot_height: f64,
    pub toe_height: f64,
    /// Max horizontal speed, cm/frame.
    pub speed: f64,
}

impl Default for ContactThresholds {
    fn default() -> Self {
        Self {
            foot_height: 12.0,
            toe_height: 3.0,
            speed: 1.5,
        }
    }
}

/// Labels {lf, lt, rf, rt} per frame from world heights and XZ speeds.
pub fn detect_contacts(clip: &RawClip, th: &ContactThresholds) -> Result<Vec<[f64; 4]>> {
    let feet = clip
        .skeleton
        .feet
        .ok_or_else(|| CoreError::Skeleton("foot joints not found".into()))?
        .as_array();
    let pos: Vec<Vec<Vec3>> = (0..clip.len()).map(|n| clip.positions(n)).collect();
    Ok(contacts_from_positions(&pos, feet, th))
}

pub(crate) fn contacts_from_positions(
    pos: &[Vec<Vec3>],
    feet: [usize; 4],
    th: &ContactThresholds,
) -> Vec<[f64; 4]> {
    let n = pos.len();
    (0..n)
        .map(|i| {
            let (a, b) = if i == 0 {
                (0, 1.min(n - 1))
            } else {
                (i - 1, i)
            };
            let mut out = [0.0; 4];
            for (k, &j) in feet.iter().enumerate() {
                let d = pos[b][j] - pos[a][j];
                let speed = (d.x * d.x + d.z * d.z).sqrt();
                let limit = if k % 2 == 0 {
                    th.foot_height
                } else {
                    th.toe_height
                };
                out[k] = f64::from(pos[i][j].y < limit && speed < th.speed);
            }
            out
        })
        .collect()
}

/// Sizes of the control vector `[c_s | c_t | c_p | c_d]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ControlLayout {
    pub joints: usize,
    pub n_types: usize,
}

impl ControlLayout {
    pub fn new(n_types: usize) -> Self {
        Self {
            joints: NUM_JOINTS,
            n_types,
        }
    }

    pub fn shape_dim(self) -> usize {
        3 * self.joints
    }

    pub fn types_start(self) -> usize {
        self.shape_dim()
    }

    pub fn types_dim(self) -> usize {
        CONTROL_SAMPLES * self.n_types
    }

    pub fn traj_start(self) -> usize {
        self.shape_dim() + self.types_dim()
    }

    pub fn dim(self) -> usize {
        self.traj_start() + TRAJ_DIM
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlRecord {
    /// Rest-pose joint positions relative to the root, cm.
    pub shape: Vec<f64>,
    /// Six rows of `n_types` type weights.
    pub types: Vec<Vec<f64>>,
    /// Future root XZ positions in the current root frame, cm.
    pub positions: [[f64; 2]; CONTROL_SAMPLES],
    /// Future facing directions (unit XZ) in the current root frame.
    pub directions: [[f64; 2]; CONTROL_SAMPLES],
}

impl ControlRecord {
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = self.shape.clone();
        for row in &self.types {
            v.extend_from_slice(row);
        }
        v.extend(self.positions.iter().flatten());
        v.extend(self.directions.iter().flatten());
        v
    }

    pub fn from_vec(v: &[f64], layout: ControlLayout) -> Result<Self> {
        if v.len() != layout.dim() {
            return Err(CoreError::Invalid(format!(
                "control vector of {} values, expected {}",
                v.len(),
                layout.dim()
            )));
        }
        let k = layout.n_types;
        let t0 = layout.types_start();
        let p0 = layout.traj_start();
        let pair = |o: usize| [v[o], v[o + 1]];
        Ok(Self {
            shape: v[..layout.shape_dim()].to_vec(),
            types: (0..CONTROL_SAMPLES)
                .map(|i| v[t0 + i * k..t0 + (i + 1) * k].to_vec())
                .collect(),
            positions: std::array::from_fn(|i| pair(p0 + 2 * i)),
            directions: std::array::from_fn(|i| pair(p0 + 12 + 2 * i)),
        })
    }

    /// Replace the trajectory block with the `TRAJ_DIM` values of `traj`.
    pub fn set_trajectory(&mut self, traj: &[f64]) {
        self.positions = std::array::from_fn(|i| [traj[2 * i], traj[2 * i + 1]]);
        self.directions = std::array::from_fn(|i| [traj[12 + 2 * i], traj[13 + 2 * i]]);
    }
}

pub fn one_hot(k: usize, n: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    if k < n {
        v[k] = 1.0;
    }
    v
}

/// Control signals of frame `n`; samples beyond the clip repeat its last frame.
pub fn extract_controls(
    clip: &RawClip,
    frame_types: &[Vec<f64>],
    n: usize,
) -> Result<ControlRecord> {
    let roots: Vec<RootState> = clip.frames.iter().map(RootState::of).collect();
    controls_from_roots(&clip.skeleton, &roots, frame_types, n)
}

pub(crate) fn controls_from_roots(
    skel: &Skeleton,
    roots: &[RootState],
    frame_types: &[Vec<f64>],
    n: usize,
) -> Result<ControlRecord> {
    if n >= roots.len() || frame_types.len() != roots.len() {
        return Err(CoreError::Invalid(format!(
            "control frame {n} outside clip of {}",
            roots.len()
        )));
    }
    let last = roots.len() - 1;
    let cur = roots[n];
    let mut positions = [[0.0; 2]; CONTROL_SAMPLES];
    let mut directions = [[0.0; 2]; CONTROL_SAMPLES];
    let mut types = Vec::with_capacity(CONTROL_SAMPLES);
    for (i, off) in CONTROL_OFFSETS.iter().enumerate() {
        let m = (n + off).min(last);
        let p = rotate_y(-cur.yaw, &(roots[m].position - cur.position));
        positions[i] = [p.x, p.z];
        directions[i] = facing(wrap_angle(roots[m].yaw - cur.yaw));
        types.push(frame_types[m].clone());
    }
    Ok(ControlRecord {
        shape: skel
            .rest_positions()
            .iter()
            .flat_map(|p| [p.x, p.y, p.z])
            .collect(),
        types,
        positions,
        directions,
    })
}

/// Upper/lower joint split of the non-root joints.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionScheme {
    pub upper: Vec<usize>,
    pub lower: Vec<usize>,
}

pub const LOWER_JOINTS: [&str; 9] = [
    "Spine",
    "LeftUpLeg",
    "LeftLeg",
    "LeftFoot",
    "LeftToeBase",
    "RightUpLeg",
    "RightLeg",
    "RightFoot",
    "RightToeBase",
];

impl PartitionScheme {
    pub fn canonical() -> Self {
        let skel = Skeleton::canonical();
        let lower: Vec<usize> = LOWER_JOINTS
            .iter()
            .map(|n| skel.index_of(n).unwrap())
            .collect();
        let upper = (1..skel.len()).filter(|j| !lower.contains(j)).collect();
        Self { upper, lower }
    }

    pub fn validate(&self, joints: usize) -> Result<()> {
        let mut seen = vec![false; joints];
        for &j in self.upper.iter().chain(&self.lower) {
            if j == 0 || j >= joints || seen[j] {
                return Err(CoreError::Config(format!(
                    "partition scheme: joint {j} invalid or repeated"
                )));
            }
            seen[j] = true;
        }
        if seen.iter().skip(1).any(|s| !s) {
            return Err(CoreError::Config(
                "partition scheme does not cover every non-root joint".into(),
            ));
        }
        Ok(())
    }

    fn columns_of(joints: &[usize], lay: Layout) -> Vec<usize> {
        let mut cols: Vec<usize> = (0..ROOT_DIM).collect();
        for &j in joints {
            for base in [lay.rot(j), lay.angvel(j), lay.pos(j), lay.vel(j)] {
                cols.extend(base..base + 3);
            }
        }
        cols
    }

    /// Feature columns gathered into the upper part vector.
    pub fn upper_columns(&self, lay: Layout) -> Vec<usize> {
        Self::columns_of(&self.upper, lay)
    }

    /// Feature columns of the lower part vector (contact labels follow them).
    pub fn lower_columns(&self, lay: Layout) -> Vec<usize> {
        Self::columns_of(&self.lower, lay)
    }

    pub fn upper_dim(&self) -> usize {
        ROOT_DIM + 12 * self.upper.len()
    }

    pub fn lower_dim(&self) -> usize {
        ROOT_DIM + 12 * self.lower.len() + CONTACT_DIM
    }
}

/// Split one frame into the upper and lower part vectors. Both start with the
/// same root block; the lower one ends with the contact labels.
pub fn split_parts(
    frame: &[f64],
    contacts: &[f64; 4],
    scheme: &PartitionScheme,
) -> (Vec<f64>, Vec<f64>) {
    let lay = Layout {
        joints: (frame.len()) / 12,
    };
    let upper = scheme
        .upper_columns(lay)
        .iter()
        .map(|&c| frame[c])
        .collect();
    let mut lower: Vec<f64> = scheme
        .lower_columns(lay)
        .iter()
        .map(|&c| frame[c])
        .collect();
    lower.extend_from_slice(contacts);
    (upper, lower)
}

/// Inverse of [`split_parts`]. The root joint's own position and velocity
/// slots, which are identically zero, are filled with zeros.
pub fn merge_parts(
    upper: &[f64],
    lower: &[f64],
    scheme: &PartitionScheme,
    joints: usize,
) -> (Vec<f64>, [f64; 4]) {
    let lay = Layout { joints };
    let mut frame = vec![0.0; lay.dim()];
    for (&c, &v) in scheme.upper_columns(lay).iter().zip(upper) {
        frame[c] = v;
    }
    let lc = scheme.lower_columns(lay);
    for (&c, &v) in lc.iter().zip(lower) {
        frame[c] = v;
    }
    let tail = &lower[lc.len()..];
    (frame, [tail[0], tail[1], tail[2], tail[3]])
}

/// Per-dimension z-score statistics. Type weights are never normalized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub layout: ControlLayout,
    pub feature_mean: Vec<f64>,
    pub feature_std: Vec<f64>,
    /// Over the full control width; the type block is fixed at mean 0, std 1.
    pub control_mean: Vec<f64>,
    pub control_std: Vec<f64>,
}

pub const STD_FLOOR: f64 = 1e-6;

#[derive(Serialize, Deserialize)]
struct LabeledDim {
    label: String,
    mean: f64,
    std: f64,
}

#[derive(Serialize, Deserialize)]
struct NormStatsFile {
    joints: usize,
    n_types: usize,
    features: Vec<LabeledDim>,
    controls: Vec<LabeledDim>,
}

fn mean_std<'a>(rows: impl Iterator<Item = &'a [f64]> + Clone, dim: usize) -> (Vec<f64>, Vec<f64>) {
    let mut mean = vec![0.0; dim];
    let mut count = 0usize;
    for r in rows.clone() {
        for (m, &v) in mean.iter_mut().zip(r) {
            *m += v;
        }
        count += 1;
    }
    let n = count.max(1) as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; dim];
    for r in rows {
        for ((s, &v), &m) in var.iter_mut().zip(r).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    let std = var.iter().map(|s| (s / n).sqrt().max(STD_FLOOR)).collect();
    (mean, std)
}

impl NormStats {
    /// Fit over all rows of every sequence.
    pub fn fit<'a>(
        features: impl Iterator<Item = &'a [f64]> + Clone,
        controls: impl Iterator<Item = &'a [f64]> + Clone,
        layout: ControlLayout,
    ) -> Result<Self> {
        if features.clone().next().is_none() {
            return Err(CoreError::Invalid(
                "cannot fit normalization on an empty dataset".into(),
            ));
        }
        let (feature_mean, feature_std) = mean_std(features, feature_dim(layout.joints));
        let (mut control_mean, mut control_std) = mean_std(controls, layout.dim());
        for c in layout.types_start()..layout.traj_start() {
            control_mean[c] = 0.0;
            control_std[c] = 1.0;
        }
        Ok(Self {
            layout,
            feature_mean,
            feature_std,
            control_mean,
            control_std,
        })
    }

    pub fn identity(layout: ControlLayout) -> Self {
        let fd = feature_dim(layout.joints);
        Self {
            layout,
            feature_mean: vec![0.0; fd],
            feature_std: vec![1.0; fd],
            control_mean: vec![0.0; layout.dim()],
            control_std: vec![1.0; layout.dim()],
        }
    }

    pub fn normalize_features(&self, x: &[f64]) -> Vec<f64> {
        zscore(x, &self.feature_mean, &self.feature_std)
    }

    pub fn denormalize_features(&self, z: &[f64]) -> Vec<f64> {
        unscore(z, &self.feature_mean, &self.feature_std)
    }

    pub fn normalize_controls(&self, c: &[f64]) -> Vec<f64> {
        zscore(c, &self.control_mean, &self.control_std)
    }

    pub fn denormalize_controls(&self, z: &[f64]) -> Vec<f64> {
        unscore(z, &self.control_mean, &self.control_std)
    }

    /// Mean and std of the trajectory block alone (c_p then c_d).
    pub fn traj_stats(&self) -> (&[f64], &[f64]) {
        let s = self.layout.traj_start();
        (&self.control_mean[s..], &self.control_std[s..])
    }

    pub fn feature_labels(joint_names: &[String]) -> Vec<String> {
        let mut l: Vec<String> = [
            "root.yaw_vel",
            "root.vel_x",
            "root.vel_z",
            "root.height",
            "root.tilt_x",
            "root.tilt_z",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        let axes = ["x", "y", "z"];
        for block in ["rot", "angvel"] {
            for name in &joint_names[1..] {
                l.extend(axes.iter().map(|a| format!("{block}.{name}.{a}")));
            }
        }
        for block in ["pos", "vel"] {
            for name in joint_names {
                l.extend(axes.iter().map(|a| format!("{block}.{name}.{a}")));
            }
        }
        l
    }

    pub fn control_labels(joint_names: &[String], n_types: usize) -> Vec<String> {
        let mut l = Vec::new();
        for name in joint_names {
            l.extend(["x", "y", "z"].iter().map(|a| format!("shape.{name}.{a}")));
        }
        for i in 0..CONTROL_SAMPLES {
            l.extend((0..n_types).map(|k| format!("type.t{i}.{k}")));
        }
        for block in ["traj_pos", "traj_dir"] {
            for i in 0..CONTROL_SAMPLES {
                l.extend(["x", "z"].iter().map(|a| format!("{block}.t{i}.{a}")));
            }
        }
        l
    }

    pub fn to_json(&self, joint_names: &[String]) -> Result<String> {
        let dims = |labels: Vec<String>, mean: &[f64], std: &[f64]| {
            labels
                .into_iter()
                .zip(mean.iter().zip(std))
                .map(|(label, (&mean, &std))| LabeledDim { label, mean, std })
                .collect()
        };
        let file = NormStatsFile {
            joints: self.layout.joints,
            n_types: self.layout.n_types,
            features: dims(
                Self::feature_labels(joint_names),
                &self.feature_mean,
                &self.feature_std,
            ),
            controls: dims(
                Self::control_labels(joint_names, self.layout.n_types),
                &self.control_mean,
                &self.control_std,
            ),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let f: NormStatsFile = serde_json::from_str(text)?;
        let layout = ControlLayout {
            joints: f.joints,
            n_types: f.n_types,
        };
        if f.features.len() != feature_dim(f.joints) || f.controls.len() != layout.dim() {
            return Err(CoreError::Invalid(
                "normalization file dimensions do not match its header".into(),
            ));
        }
        if f.features
            .iter()
            .chain(&f.controls)
            .any(|d| !(d.std >= STD_FLOOR))
        {
            return Err(CoreError::Invalid("normalization std below floor".into()));
        }
        Ok(Self {
            layout,
            feature_mean: f.features.iter().map(|d| d.mean).collect(),
            feature_std: f.features.iter().map(|d| d.std).collect(),
            control_mean: f.controls.iter().map(|d| d.mean).collect(),
            control_std: f.controls.iter().map(|d| d.std).collect(),
        })
    }
}

fn zscore(x: &[f64], mean: &[f64], std: &[f64]) -> Vec<f64> {
    x.iter()
        .zip(mean)
        .zip(std)
        .map(|((&v, &m), &s)| (v - m) / s)
        .collect()
}

fn unscore(z: &[f64], mean: &[f64], std: &[f64]) -> Vec<f64> {
    z.iter()
        .zip(mean)
        .zip(std)
        .map(|((&v, &m), &s)| v * s + m)
        .collect()
}

/// A clip converted to model currency. Row `i` describes clip frame `i + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionSequence {
    pub name: String,
    /// Rows × feature dim.
    pub features: Vec<Vec<f64>>,
    pub contacts: Vec<[f64; 4]>,
    pub controls: Vec<Vec<f64>>,
    /// Dominant type id per row.
    pub types: Vec<usize>,
    /// Clip poses; `poses[0]` precedes row 0.
    pub poses: Vec<Pose>,
}

impl MotionSequence {
    /// `frame_types` holds one type-weight row per clip frame.
    pub fn from_clip(
        name: impl Into<String>,
        clip: &RawClip,
        frame_types: &[Vec<f64>],
        th: &ContactThresholds,
    ) -> Result<Self> {
        if clip.len() < 2 {
            return Err(CoreError::Invalid(
                "a clip needs at least two frames".into(),
            ));
        }
        if frame_types.len() != clip.len() {
            return Err(CoreError::Invalid(
                "one type row per frame is required".into(),
            ));
        }
        let skel = &clip.skeleton;
        let feet = skel
            .feet
            .ok_or_else(|| CoreError::Skeleton("foot joints not found".into()))?
            .as_array();
        let geoms: Vec<FrameGeom> = clip
            .frames
            .iter()
            .map(|p| FrameGeom::new(skel, p))
            .collect();
        let positions: Vec<Vec<Vec3>> = geoms.iter().map(|g| g.positions.clone()).collect();
        let contacts = contacts_from_positions(&positions, feet, th);
        let roots: Vec<RootState> = geoms
            .iter()
            .map(|g| RootState {
                position: g.root,
                yaw: g.yaw,
            })
            .collect();
        let mut features = Vec::with_capacity(clip.len() - 1);
        let mut controls = Vec::with_capacity(clip.len() - 1);
        for n in 1..clip.len() {
            features.push(features_from(
                skel,
                &clip.frames[n - 1],
                &clip.frames[n],
                &geoms[n - 1],
                &geoms[n],
            ));
            controls.push(controls_from_roots(skel, &roots, frame_types, n)?.to_vec());
        }
        let types = frame_types[1..]
            .iter()
            .map(|w| {
                w.iter()
                    .enumerate()
                    .fold(
                        (0, f64::MIN),
                        |best, (k, &v)| if v > best.1 { (k, v) } else { best },
                    )
                    .0
            })
            .collect();
        Ok(Self {
            name: name.into(),
            features,
            contacts: contacts[1..].to_vec(),
            controls,
            types,
            poses: clip.frames.clone(),
        })
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }
}

/// Rotation of the yaw-free root for a tilt pair.
pub fn tilt_quat(tilt: [f64; 2]) -> Quat {
    expmap_to_quat(&Vec3::new(tilt[0], 0.0, tilt[1]))
}
