//! Autoregressive generation sessions and trajectory-driven controls.

use std::collections::VecDeque;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use tptn_autodiff::{Real, Tensor};

use crate::bvh::Pose;
use crate::checkpoint::Checkpoint;
use crate::data::to_tensor;
use crate::error::{CoreError, Result};
use crate::features::{
    split_parts, ControlRecord, Layout, MotionSequence, NormStats, RootState, CONTROL_OFFSETS,
    CONTROL_SAMPLES, TRAJ_DIM,
};
use crate::ik::FootLocker;
use crate::losses::STD_CLAMP;
use crate::model::Tptn;
use crate::rot::{expmap_to_quat, from_yaw_tilt, rotate_y, yaw_tilt, Vec3};
use crate::skeleton::Skeleton;

/// Everything a session needs from a checkpoint, shared read-only.
#[derive(Debug, Clone)]
pub struct Synthesizer<T: Real> {
    pub model: Tptn<T>,
    pub stats: NormStats,
    pub skeleton: Skeleton,
    pub type_names: Vec<String>,
    pub fps: f64,
}

impl<T: Real> Synthesizer<T> {
    pub fn from_checkpoint(ck: Checkpoint<T>) -> Self {
        let ck = ck.for_inference();
        Self {
            model: ck.model,
            stats: ck.meta.stats,
            skeleton: ck.meta.skeleton,
            type_names: ck.meta.type_names,
            fps: ck.meta.fps,
        }
    }

    pub fn trl(&self) -> usize {
        self.model.config.trl()
    }

    pub fn n_types(&self) -> usize {
        self.type_names.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleMode {
    #[default]
    Sample,
    Mean,
}

/// Positional-encoding indices of the buffered rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Positions {
    /// `0 .. len`, as in training clips.
    #[default]
    Window,
    /// Absolute frame index since the first warm-up row.
    Absolute,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SessionConfig {
    pub mode: SampleMode,
    pub ik: bool,
    pub seed: u64,
    pub warmup: usize,
    pub ik_blend_frames: usize,
    pub positions: Positions,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            mode: SampleMode::Sample,
            ik: true,
            seed: 0,
            warmup: 30,
            ik_blend_frames: 5,
            positions: Positions::Window,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ControlSource {
    /// Ground truth seeded before generation.
    Warmup,
    User,
    Predicted,
}

/// Initial frames: feature rows with their contacts and controls, plus the
/// pose reached after the last row.
#[derive(Debug, Clone)]
pub struct Warmup {
    pub features: Vec<Vec<f64>>,
    pub contacts: Vec<[f64; 4]>,
    pub controls: Vec<ControlRecord>,
    pub pose: Pose,
}

impl Warmup {
    /// The first `frames` rows of a sequence (fewer if it is shorter).
    pub fn from_sequence(seq: &MotionSequence, frames: usize, n_types: usize) -> Result<Self> {
        let n = frames.min(seq.len());
        if n == 0 {
            return Err(CoreError::Invalid(
                "warm-up needs at least one frame".into(),
            ));
        }
        let layout = crate::features::ControlLayout::new(n_types);
        Ok(Self {
            features: seq.features[..n].to_vec(),
            contacts: seq.contacts[..n].to_vec(),
            controls: seq.controls[..n]
                .iter()
                .map(|c| ControlRecord::from_vec(c, layout))
                .collect::<Result<_>>()?,
            pose: seq.poses[n].clone(),
        })
    }
}

#[derive(Debug, Clone)]
struct Row {
    upper: Vec<f64>,
    lower: Vec<f64>,
    control_norm: Vec<f64>,
    control: ControlRecord,
    source: ControlSource,
}

/// Result of one step.
#[derive(Debug, Clone)]
pub struct Frame {
    /// Index of the generated frame, counting warm-up rows.
    pub index: u64,
    /// Denormalized feature vector that was committed.
    pub features: Vec<f64>,
    /// Thresholded labels {lf, lt, rf, rt}.
    pub contacts: [f64; 4],
    pub contact_probs: [f64; 4],
    /// Predicted density of the normalized next frame.
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Network pose, before IK.
    pub raw_pose: Pose,
    /// Output pose (IK-corrected when enabled).
    pub pose: Pose,
    pub root: RootState,
    /// Control the prediction was conditioned on, and where it came from.
    pub control: ControlRecord,
    pub source: ControlSource,
}

/// `μ + max(exp(logstd), floor)·ε` per dimension.
pub fn sample_gaussian<R: Rng + ?Sized>(mean: &[f64], logstd: &[f64], rng: &mut R) -> Vec<f64> {
    mean.iter()
        .zip(logstd)
        .map(|(&m, &l)| {
            let e: f64 = rng.sample(StandardNormal);
            m + l.exp().max(STD_CLAMP) * e
        })
        .collect()
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Advance the root by one feature frame. The yaw is kept unwrapped.
pub fn integrate_root(root: &RootState, f: &[f64]) -> RootState {
    let step = rotate_y(root.yaw, &Vec3::new(f[1], 0.0, f[2]));
    RootState {
        position: Vec3::new(root.position.x + step.x, f[3], root.position.z + step.z),
        yaw: root.yaw + f[0],
    }
}

/// Pose of a feature frame placed at `root`.
pub fn pose_from_features(root: &RootState, f: &[f64], joints: usize) -> Pose {
    let lay = Layout { joints };
    let mut rotations = Vec::with_capacity(joints);
    rotations.push(from_yaw_tilt(root.yaw, [f[4], f[5]]));
    for j in 1..joints {
        let o = lay.rot(j);
        rotations.push(expmap_to_quat(&Vec3::new(f[o], f[o + 1], f[o + 2])));
    }
    Pose {
        root_position: root.position,
        rotations,
    }
}

/// One autoregressive generation stream.
#[derive(Debug)]
pub struct Session<T: Real> {
    synth: Arc<Synthesizer<T>>,
    cfg: SessionConfig,
    rows: VecDeque<Row>,
    /// Rows ever pushed, warm-up included.
    pushed: u64,
    root: RootState,
    rng: ChaCha8Rng,
    ik: Option<FootLocker>,
    failed: bool,
}

impl<T: Real> Session<T> {
    pub fn new(synth: Arc<Synthesizer<T>>, cfg: SessionConfig, warmup: &Warmup) -> Result<Self> {
        let n = warmup.features.len();
        if n == 0 || warmup.contacts.len() != n || warmup.controls.len() != n {
            return Err(CoreError::Invalid(
                "warm-up needs matching, non-empty feature, contact and control rows".into(),
            ));
        }
        let ik = if cfg.ik {
            Some(
                FootLocker::new(&synth.skeleton, cfg.ik_blend_frames).ok_or_else(|| {
                    CoreError::Skeleton("IK needs foot joints with two parents".into())
                })?,
            )
        } else {
            None
        };
        let (yaw, _) = yaw_tilt(&warmup.pose.rotations[0]);
        let mut s = Self {
            rows: VecDeque::with_capacity(synth.trl() + 1),
            synth,
            cfg,
            pushed: 0,
            root: RootState {
                position: warmup.pose.root_position,
                yaw,
            },
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            ik,
            failed: false,
        };
        for i in 0..n {
            let z = s.synth.stats.normalize_features(&warmup.features[i]);
            s.push(
                &z,
                &warmup.contacts[i],
                warmup.controls[i].clone(),
                ControlSource::Warmup,
            );
        }
        Ok(s)
    }

    pub fn config(&self) -> &SessionConfig {
        &self.cfg
    }

    pub fn synthesizer(&self) -> &Arc<Synthesizer<T>> {
        &self.synth
    }

    pub fn root(&self) -> RootState {
        self.root
    }

    pub fn buffered(&self) -> usize {
        self.rows.len()
    }

    /// Frames committed so far, warm-up included.
    pub fn frames(&self) -> u64 {
        self.pushed
    }

    pub fn is_failed(&self) -> bool {
        self.failed
    }

    /// The control the next step will use when none is supplied.
    pub fn pending_control(&self) -> Option<&ControlRecord> {
        self.rows.back().map(|r| &r.control)
    }

    fn push(
        &mut self,
        z: &[f64],
        contacts: &[f64; 4],
        control: ControlRecord,
        source: ControlSource,
    ) {
        let scheme = &self.synth.model.config.partition;
        let (upper, lower) = split_parts(z, contacts, scheme);
        let control_norm = self.synth.stats.normalize_controls(&control.to_vec());
        if self.rows.len() == self.synth.trl() {
            self.rows.pop_front();
        }
        self.rows.push_back(Row {
            upper,
            lower,
            control_norm,
            control,
            source,
        });
        self.pushed += 1;
    }

    fn input(&self) -> Result<crate::model::SequenceInput<T>> {
        let col = |f: fn(&Row) -> &Vec<f64>| -> Result<Tensor<T>> {
            let rows: Vec<Vec<f64>> = self.rows.iter().map(|r| f(r).clone()).collect();
            to_tensor(&rows)
        };
        let position_offset = match self.cfg.positions {
            Positions::Window => 0,
            Positions::Absolute => (self.pushed as usize) - self.rows.len(),
        };
        Ok(crate::model::SequenceInput {
            upper: col(|r| &r.upper)?,
            lower: col(|r| &r.lower)?,
            controls: col(|r| &r.control_norm)?,
            position_offset,
        })
    }

    /// Generate the next frame. A supplied control replaces the one attached
    /// to the newest buffered frame before the forward pass; otherwise the
    /// model's own trajectory prediction (or the warm-up control) is used.
    pub fn step(&mut self, control: Option<&ControlRecord>) -> Result<Frame> {
        if self.failed {
            return Err(CoreError::Invalid(
                "session failed on a non-finite prediction".into(),
            ));
        }
        let Some(last) = self.rows.back_mut() else {
            return Err(CoreError::Invalid("empty frame buffer".into()));
        };
        if let Some(c) = control {
            if c.types.len() != CONTROL_SAMPLES
                || c.types.iter().any(|t| t.len() != self.synth.n_types())
            {
                return Err(CoreError::Invalid(
                    "control type block does not match the model".into(),
                ));
            }
            last.control_norm = self.synth.stats.normalize_controls(&c.to_vec());
            last.control = c.clone();
            last.source = ControlSource::User;
        }
        let (used, source) = (last.control.clone(), last.source);

        let pred = self.synth.model.predict(&self.input()?)?;
        let r = self.rows.len() - 1;
        let row = |t: &Tensor<T>| -> Vec<f64> {
            t.row_slice(r).iter().map(|v| v.to_f64_lossy()).collect()
        };
        let (mean, logstd, traj, logits) = (
            row(&pred.mean),
            row(&pred.logstd),
            row(&pred.traj_mean),
            row(&pred.contact_logits),
        );
        if [&mean, &logstd, &traj, &logits]
            .iter()
            .any(|v| v.iter().any(|x| !x.is_finite()))
        {
            self.failed = true;
            return Err(CoreError::NonFinite(format!(
                "prediction at frame {}",
                self.pushed
            )));
        }
        let z = match self.cfg.mode {
            SampleMode::Mean => mean.clone(),
            SampleMode::Sample => sample_gaussian(&mean, &logstd, &mut self.rng),
        };
        let features = self.synth.stats.denormalize_features(&z);
        let contact_probs: [f64; 4] = std::array::from_fn(|k| sigmoid(logits[k]));
        let contacts = contact_probs.map(|p| f64::from(p >= 0.5));

        let (tm, ts) = self.synth.stats.traj_stats();
        let mut next_traj: Vec<f64> = (0..TRAJ_DIM).map(|i| traj[i] * ts[i] + tm[i]).collect();
        for k in 0..CONTROL_SAMPLES {
            let d = &mut next_traj[12 + 2 * k..14 + 2 * k];
            let n = d[0].hypot(d[1]);
            if n > 1e-9 {
                d[0] /= n;
                d[1] /= n;
            }
        }
        let mut next_control = used.clone();
        next_control.set_trajectory(&next_traj);

        self.root = integrate_root(&self.root, &features);
        let raw_pose = pose_from_features(&self.root, &features, self.synth.skeleton.len());
        let pose = match &mut self.ik {
            Some(ik) => ik.apply(&self.synth.skeleton, &raw_pose, &contacts),
            None => raw_pose.clone(),
        };
        self.push(&z, &contacts, next_control, ControlSource::Predicted);
        Ok(Frame {
            index: self.pushed - 1,
            features,
            contacts,
            contact_probs,
            std: logstd.iter().map(|l| l.exp().max(STD_CLAMP)).collect(),
            mean,
            raw_pose,
            pose,
            root: self.root,
            control: used,
            source,
        })
    }
}

/// One stretch of a drawn path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectoryPart {
    /// Densely sampled ground-plane points (x, z), cm.
    pub points: Vec<[f64; 2]>,
    pub type_id: usize,
    /// cm/s.
    pub speed: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectorySpec {
    pub parts: Vec<TrajectoryPart>,
    /// Motion type once the path is exhausted; the last part's type if unset.
    #[serde(default)]
    pub end_type: Option<usize>,
}

/// Frames over which two consecutive motion types are cross-faded.
pub const TYPE_FADE_FRAMES: f64 = 40.0;

#[derive(Debug, Clone)]
struct TimedPart {
    points: Vec<[f64; 2]>,
    /// Cumulative arc length at each point.
    arc: Vec<f64>,
    type_id: usize,
    speed: f64,
    start: f64,
    duration: f64,
}

/// A validated spec with arc-length and time parameterization.
#[derive(Debug, Clone)]
pub struct Trajectory {
    parts: Vec<TimedPart>,
    end_type: usize,
    n_types: usize,
}

impl TrajectorySpec {
    /// A single straight part from `from` to `to` sampled every `step` cm.
    pub fn line(from: [f64; 2], to: [f64; 2], step: f64, type_id: usize, speed: f64) -> Self {
        let len = (to[0] - from[0]).hypot(to[1] - from[1]);
        let n = ((len / step).ceil() as usize).max(1);
        let points = (0..=n)
            .map(|i| {
                let a = i as f64 / n as f64;
                [
                    from[0] + a * (to[0] - from[0]),
                    from[1] + a * (to[1] - from[1]),
                ]
            })
            .collect();
        Self {
            parts: vec![TrajectoryPart {
                points,
                type_id,
                speed,
            }],
            end_type: None,
        }
    }

    pub fn compile(&self, n_types: usize) -> Result<Trajectory> {
        if self.parts.is_empty() {
            return Err(CoreError::Invalid("trajectory has no parts".into()));
        }
        let mut parts = Vec::with_capacity(self.parts.len());
        let mut t = 0.0;
        for (i, p) in self.parts.iter().enumerate() {
            if p.points.len() < 2 {
                return Err(CoreError::Invalid(format!(
                    "trajectory part {i} has fewer than two points"
                )));
            }
            if !(p.speed > 0.0) || !p.speed.is_finite() {
                return Err(CoreError::Invalid(format!(
                    "trajectory part {i} has speed {}",
                    p.speed
                )));
            }
            if p.type_id >= n_types {
                return Err(CoreError::Invalid(format!(
                    "trajectory part {i} has type {} of {n_types}",
                    p.type_id
                )));
            }
            if i > 0 {
                let prev = self.parts[i - 1].points.last().expect("checked above");
                let d = (prev[0] - p.points[0][0]).hypot(prev[1] - p.points[0][1]);
                if d > 1e-6 {
                    return Err(CoreError::Invalid(format!(
                        "trajectory part {i} does not start where part {} ends",
                        i - 1
                    )));
                }
            }
            let mut arc = Vec::with_capacity(p.points.len());
            arc.push(0.0);
            for w in p.points.windows(2) {
                let s = arc.last().copied().unwrap_or(0.0)
                    + (w[1][0] - w[0][0]).hypot(w[1][1] - w[0][1]);
                arc.push(s);
            }
            let len = *arc.last().expect("two points");
            if !(len > 0.0) || !len.is_finite() {
                return Err(CoreError::Invalid(format!(
                    "trajectory part {i} has zero length"
                )));
            }
            let duration = len / p.speed;
            parts.push(TimedPart {
                points: p.points.clone(),
                arc,
                type_id: p.type_id,
                speed: p.speed,
                start: t,
                duration,
            });
            t += duration;
        }
        let end_type = self
            .end_type
            .unwrap_or(self.parts[self.parts.len() - 1].type_id);
        if end_type >= n_types {
            return Err(CoreError::Invalid(format!(
                "end type {end_type} of {n_types}"
            )));
        }
        Ok(Trajectory {
            parts,
            end_type,
            n_types,
        })
    }

    /// Map points given in the frame of `root` (origin at the root, +Z
    /// along its facing) to world coordinates.
    pub fn to_world(&self, root: &RootState) -> Self {
        let mut out = self.clone();
        for part in &mut out.parts {
            for p in &mut part.points {
                let w = rotate_y(root.yaw, &Vec3::new(p[0], 0.0, p[1]));
                *p = [root.position.x + w.x, root.position.z + w.z];
            }
        }
        out
    }

    /// All points in order, shared endpoints once.
    pub fn polyline(&self) -> Vec<[f64; 2]> {
        let mut out: Vec<[f64; 2]> = Vec::new();
        for (i, p) in self.parts.iter().enumerate() {
            out.extend_from_slice(if i == 0 { &p.points } else { &p.points[1..] });
        }
        out
    }
}

impl Trajectory {
    /// Total traversal time, seconds.
    pub fn duration(&self) -> f64 {
        let p = self.parts.last().expect("non-empty");
        p.start + p.duration
    }

    /// Point and unit tangent at time `t` seconds. Before the start the first
    /// point is used and after the end the last one is held.
    pub fn at(&self, t: f64) -> ([f64; 2], [f64; 2]) {
        let idx = self.parts.iter().rposition(|p| p.start <= t).unwrap_or(0);
        let p = &self.parts[idx];
        let s = (p.speed * (t - p.start)).clamp(0.0, *p.arc.last().expect("two points"));
        let k = p
            .arc
            .partition_point(|&a| a <= s)
            .clamp(1, p.points.len() - 1);
        let (a, b) = (p.points[k - 1], p.points[k]);
        let seg = p.arc[k] - p.arc[k - 1];
        let u = if seg > 0.0 {
            (s - p.arc[k - 1]) / seg
        } else {
            0.0
        };
        let point = [a[0] + u * (b[0] - a[0]), a[1] + u * (b[1] - a[1])];
        (point, tangent(&p.points, k))
    }

    /// Type weights at frame `f` (frames since the start at `fps`): one-hot
    /// part types box-filtered over `TYPE_FADE_FRAMES`, which is a linear
    /// cross-fade centred on each boundary.
    pub fn type_weights(&self, f: f64, fps: f64) -> Vec<f64> {
        let half = TYPE_FADE_FRAMES / 2.0;
        let (lo, hi) = (f - half, f + half);
        let mut w = vec![0.0; self.n_types];
        let n = self.parts.len();
        for (i, p) in self.parts.iter().enumerate() {
            let a = if i == 0 {
                f64::NEG_INFINITY
            } else {
                p.start * fps
            };
            let b = (p.start + p.duration) * fps;
            w[p.type_id] += overlap(lo, hi, a, b) / TYPE_FADE_FRAMES;
            if i == n - 1 {
                w[self.end_type] += overlap(lo, hi, b, f64::INFINITY) / TYPE_FADE_FRAMES;
            }
        }
        w
    }
}

fn overlap(lo: f64, hi: f64, a: f64, b: f64) -> f64 {
    (hi.min(b) - lo.max(a)).max(0.0)
}

/// Unit direction of segment `k − 1 → k`, or of the nearest non-degenerate
/// segment.
fn tangent(points: &[[f64; 2]], k: usize) -> [f64; 2] {
    let dir = |i: usize| {
        let (a, b) = (points[i - 1], points[i]);
        let (dx, dz) = (b[0] - a[0], b[1] - a[1]);
        let n = dx.hypot(dz);
        (n > 0.0).then(|| [dx / n, dz / n])
    };
    (k..points.len())
        .chain((1..k).rev())
        .find_map(dir)
        .unwrap_or([0.0, 1.0])
}

/// Controls for the frame at `t` seconds along `traj` with the character at
/// `root`: future points and tangents at the control offsets in the root
/// frame, and cross-faded type weights.
pub fn trajectory_to_controls(
    traj: &Trajectory,
    root: &RootState,
    t: f64,
    fps: f64,
    shape: &[f64],
) -> ControlRecord {
    let mut positions = [[0.0; 2]; CONTROL_SAMPLES];
    let mut directions = [[0.0; 2]; CONTROL_SAMPLES];
    let mut types = Vec::with_capacity(CONTROL_SAMPLES);
    for (k, &off) in CONTROL_OFFSETS.iter().enumerate() {
        let tk = t + off as f64 / fps;
        let (p, d) = traj.at(tk);
        let rel = rotate_y(
            -root.yaw,
            &Vec3::new(p[0] - root.position.x, 0.0, p[1] - root.position.z),
        );
        positions[k] = [rel.x, rel.z];
        let dr = rotate_y(-root.yaw, &Vec3::new(d[0], 0.0, d[1]));
        directions[k] = [dr.x, dr.z];
        types.push(traj.type_weights(tk * fps, fps));
    }
    ControlRecord {
        shape: shape.to_vec(),
        types,
        positions,
        directions,
    }
}

/// Distance from `p` to segment `a b`.
pub fn point_segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let (dx, dz) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dx * dx + dz * dz;
    let u = if len2 > 0.0 {
        (((p[0] - a[0]) * dx + (p[1] - a[1]) * dz) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    (p[0] - a[0] - u * dx).hypot(p[1] - a[1] - u * dz)
}

/// Mean over the track of each point's distance to the polyline, cm/frame.
pub fn trajectory_distance(track: &[[f64; 2]], polyline: &[[f64; 2]]) -> Result<f64> {
    if polyline.is_empty() {
        return Err(CoreError::Invalid("empty target polyline".into()));
    }
    if track.is_empty() {
        return Err(CoreError::Invalid("empty root track".into()));
    }
    let dist = |p: [f64; 2]| -> f64 {
        if polyline.len() == 1 {
            return (p[0] - polyline[0][0]).hypot(p[1] - polyline[0][1]);
        }
        polyline
            .windows(2)
            .map(|w| point_segment_distance(p, w[0], w[1]))
            .fold(f64::INFINITY, f64::min)
    };
    Ok(track.iter().map(|&p| dist(p)).sum::<f64>() / track.len() as f64)
}

/// Root XZ track of a pose sequence.
pub fn root_track(poses: &[Pose]) -> Vec<[f64; 2]> {
    poses
        .iter()
        .map(|p| [p.root_position.x, p.root_position.z])
        .collect()
}

/// Facing-aligned yaw of a trajectory tangent.
pub fn tangent_yaw(d: [f64; 2]) -> f64 {
    d[0].atan2(d[1])
}
