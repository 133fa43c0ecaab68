//! Motion quality metrics and evaluation reports.

use std::fmt::Write as _;
use std::sync::Arc;

use rand::SeedableRng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tptn_autodiff::Real;

use crate::bvh::Pose;
use crate::data::{make_clip, Sequence};
use crate::error::{CoreError, Result};
use crate::features::{apply_frame, ControlLayout, ControlRecord, MotionSequence};
use crate::rot::{quat_to_expmap, wrap_angle, yaw_tilt, Vec3};
use crate::skeleton::Skeleton;
use crate::synthesis::{
    root_track, trajectory_distance, SampleMode, Session, SessionConfig, Synthesizer, Warmup,
};

/// Per-joint rotation angles in degrees, one row of `J` triples per frame.
/// Non-root joints use their exp-map; the root uses (tilt x, yaw, tilt z)
/// with the yaw unwrapped across frames.
pub fn joint_angle_tracks(poses: &[Pose]) -> Vec<Vec<[f64; 3]>> {
    let mut yaw_prev: Option<(f64, f64)> = None;
    poses
        .iter()
        .map(|p| {
            let (yaw, tilt) = yaw_tilt(&p.rotations[0]);
            let unwrapped = match yaw_prev {
                Some((raw, acc)) => acc + wrap_angle(yaw - raw),
                None => yaw,
            };
            yaw_prev = Some((yaw, unwrapped));
            let mut row = Vec::with_capacity(p.rotations.len());
            row.push([
                tilt[0].to_degrees(),
                unwrapped.to_degrees(),
                tilt[1].to_degrees(),
            ]);
            for q in &p.rotations[1..] {
                let e = quat_to_expmap(q);
                row.push([e.x.to_degrees(), e.y.to_degrees(), e.z.to_degrees()]);
            }
            row
        })
        .collect()
}

/// Body movement: mean over frame pairs of the summed absolute angle change
/// of every joint, deg/frame.
pub fn body_movement(angles: &[Vec<[f64; 3]>]) -> Result<f64> {
    if angles.len() < 2 {
        return Err(CoreError::Invalid(format!(
            "body movement needs at least 2 frames, got {}",
            angles.len()
        )));
    }
    let mut total = 0.0;
    for w in angles.windows(2) {
        if w[0].len() != w[1].len() {
            return Err(CoreError::Invalid(
                "joint count changes between frames".into(),
            ));
        }
        for (a, b) in w[0].iter().zip(&w[1]) {
            total += (0..3).map(|k| (b[k] - a[k]).abs()).sum::<f64>();
        }
    }
    Ok(total / (angles.len() - 1) as f64)
}

/// Height scales of the foot-sliding weight, cm, for {foot, toe}.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SlideHeights {
    pub foot: f64,
    pub toe: f64,
}

impl Default for SlideHeights {
    fn default() -> Self {
        Self {
            foot: 10.85,
            toe: 1.55,
        }
    }
}

impl SlideHeights {
    /// In label order {lf, lt, rf, rt}.
    pub fn per_joint(&self) -> [f64; 4] {
        [self.foot, self.toe, self.foot, self.toe]
    }
}

/// Average foot sliding, cm/frame. Row `n` of `speeds` and `heights` holds
/// the XZ displacement into frame `n + 1` and the height at frame `n + 1`
/// of the four contact joints.
pub fn average_foot_sliding(speeds: &[[f64; 4]], heights: &[[f64; 4]], h: [f64; 4]) -> Result<f64> {
    if h.iter().any(|&v| !(v > 0.0)) {
        return Err(CoreError::Invalid(format!(
            "foot sliding heights must be positive, got {h:?}"
        )));
    }
    if speeds.is_empty() || speeds.len() != heights.len() {
        return Err(CoreError::Invalid(
            "foot sliding needs matching, non-empty speed and height rows".into(),
        ));
    }
    let mut total = 0.0;
    for (v, y) in speeds.iter().zip(heights) {
        for j in 0..4 {
            total += v[j] * (2.0 - 2f64.powf((y[j] / h[j]).clamp(0.0, 1.0)));
        }
    }
    Ok(total / (4 * speeds.len()) as f64)
}

/// World positions of the four contact joints per frame.
pub fn foot_positions(skel: &Skeleton, poses: &[Pose]) -> Result<Vec<[Vec3; 4]>> {
    let feet = skel
        .feet
        .ok_or_else(|| CoreError::Skeleton("foot joints not found".into()))?
        .as_array();
    poses
        .iter()
        .map(|p| {
            let (pos, _) = skel.forward_kinematics(&p.rotations, &p.root_position)?;
            Ok(feet.map(|j| pos[j]))
        })
        .collect()
}

/// Average foot sliding of a pose sequence.
pub fn foot_sliding_of(skel: &Skeleton, poses: &[Pose], h: &SlideHeights) -> Result<f64> {
    if poses.len() < 2 {
        return Err(CoreError::Invalid(
            "foot sliding needs at least 2 frames".into(),
        ));
    }
    let feet = foot_positions(skel, poses)?;
    let speeds: Vec<[f64; 4]> = feet
        .windows(2)
        .map(|w| std::array::from_fn(|j| (w[1][j].x - w[0][j].x).hypot(w[1][j].z - w[0][j].z)))
        .collect();
    let heights: Vec<[f64; 4]> = feet[1..].iter().map(|f| f.map(|p| p.y)).collect();
    average_foot_sliding(&speeds, &heights, h.per_joint())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SsimOptions {
    pub window: usize,
    pub k1: f64,
    pub k2: f64,
    /// Use `σ₁₂` instead of `2σ₁₂` in the structure numerator.
    pub literal_covariance: bool,
}

impl Default for SsimOptions {
    fn default() -> Self {
        Self {
            window: 11,
            k1: 0.01,
            k2: 0.03,
            literal_covariance: false,
        }
    }
}

/// SSIM of one scalar channel, averaged over stride-1 windows.
pub fn channel_ssim(gen: &[f64], gt: &[f64], o: &SsimOptions) -> Result<f64> {
    let n = gt.len();
    if gen.len() != n {
        return Err(CoreError::Invalid(format!(
            "SSIM length mismatch: {} vs {n}",
            gen.len()
        )));
    }
    if o.window == 0 || n < o.window {
        return Err(CoreError::Invalid(format!(
            "SSIM needs at least {} frames, got {n}",
            o.window.max(1)
        )));
    }
    let lo = gt.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = gt.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let l = if hi - lo > 0.0 { hi - lo } else { 1.0 };
    let (c1, c2) = ((o.k1 * l).powi(2), (o.k2 * l).powi(2));
    let cov_scale = if o.literal_covariance { 1.0 } else { 2.0 };
    let w = o.window as f64;
    let mut total = 0.0;
    let windows = n - o.window + 1;
    for s in 0..windows {
        let x = gen[s..s + o.window].iter().map(|v| v - lo);
        let y = gt[s..s + o.window].iter().map(|v| v - lo);
        let (mx, my) = (x.clone().sum::<f64>() / w, y.clone().sum::<f64>() / w);
        let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
        for (a, b) in x.zip(y) {
            vx += (a - mx) * (a - mx);
            vy += (b - my) * (b - my);
            cxy += (a - mx) * (b - my);
        }
        let (vx, vy, cxy) = (vx / w, vy / w, cxy / w);
        total += ((2.0 * mx * my + c1) * (cov_scale * cxy + c2))
            / ((mx * mx + my * my + c1) * (vx + vy + c2));
    }
    Ok(total / windows as f64)
}

/// Mean SSIM over channels; `gen[n][c]` is channel `c` at frame `n`.
pub fn motion_ssim(gen: &[Vec<f64>], gt: &[Vec<f64>], o: &SsimOptions) -> Result<f64> {
    if gen.len() != gt.len() {
        return Err(CoreError::Invalid(format!(
            "SSIM length mismatch: {} vs {}",
            gen.len(),
            gt.len()
        )));
    }
    let channels = gt.first().map_or(0, Vec::len);
    if channels == 0 || gen.iter().chain(gt).any(|r| r.len() != channels) {
        return Err(CoreError::Invalid(
            "SSIM needs equal, non-zero channel counts".into(),
        ));
    }
    let mut total = 0.0;
    for c in 0..channels {
        let a: Vec<f64> = gen.iter().map(|r| r[c]).collect();
        let b: Vec<f64> = gt.iter().map(|r| r[c]).collect();
        total += channel_ssim(&a, &b, o)?;
    }
    Ok(total / channels as f64)
}

/// Exp-map channels of the non-root joints, radians.
pub fn expmap_channels(poses: &[Pose]) -> Vec<Vec<f64>> {
    poses
        .iter()
        .map(|p| {
            p.rotations[1..]
                .iter()
                .flat_map(|q| {
                    let e = quat_to_expmap(q);
                    [e.x, e.y, e.z]
                })
                .collect()
        })
        .collect()
}

/// Mean per-joint position error, cm.
pub fn mpjpe(gen: &[Vec<Vec3>], gt: &[Vec<Vec3>]) -> Result<f64> {
    if gen.len() != gt.len()
        || gen.is_empty()
        || gen
            .iter()
            .zip(gt)
            .any(|(a, b)| a.len() != b.len() || a.is_empty())
    {
        return Err(CoreError::Invalid(
            "MPJPE needs equal, non-empty shapes".into(),
        ));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for (a, b) in gen.iter().zip(gt) {
        for (p, q) in a.iter().zip(b) {
            total += (p - q).norm();
        }
        count += a.len();
    }
    Ok(total / count as f64)
}

/// Joint positions minus the root position, world orientation.
pub fn root_relative_positions(skel: &Skeleton, poses: &[Pose]) -> Result<Vec<Vec<Vec3>>> {
    poses
        .iter()
        .map(|p| {
            let (pos, _) = skel.forward_kinematics(&p.rotations, &p.root_position)?;
            Ok(pos.iter().map(|x| x - p.root_position).collect())
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Scores {
    /// deg/frame
    pub bm: f64,
    /// cm/frame
    pub afs: f64,
    pub ssim: f64,
    /// cm
    pub mpjpe: f64,
    /// cm/frame
    pub trajectory_distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceScores {
    pub name: String,
    pub frames: usize,
    #[serde(flatten)]
    pub scores: Scores,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub checkpoint: String,
    pub dataset: String,
    pub protocol: String,
    pub warmup: usize,
    pub sequences: Vec<SequenceScores>,
    /// Unweighted mean over sequences.
    pub mean: Scores,
}

impl MetricReport {
    pub fn new(
        checkpoint: String,
        dataset: String,
        protocol: String,
        warmup: usize,
        sequences: Vec<SequenceScores>,
    ) -> Self {
        let mut mean = Scores::default();
        let n = sequences.len().max(1) as f64;
        for s in &sequences {
            mean.bm += s.scores.bm / n;
            mean.afs += s.scores.afs / n;
            mean.ssim += s.scores.ssim / n;
            mean.mpjpe += s.scores.mpjpe / n;
            mean.trajectory_distance += s.scores.trajectory_distance / n;
        }
        Self {
            checkpoint,
            dataset,
            protocol,
            warmup,
            sequences,
            mean,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Aligned text table, one row per sequence plus the mean.
    pub fn to_table(&self) -> String {
        let rows: Vec<(String, String, Scores)> = self
            .sequences
            .iter()
            .map(|s| (s.name.clone(), s.frames.to_string(), s.scores))
            .chain(std::iter::once((
                "mean".to_string(),
                String::new(),
                self.mean,
            )))
            .collect();
        let name_w = rows.iter().map(|r| r.0.len()).max().unwrap_or(0).max(8);
        let mut out = String::new();
        let _ = writeln!(out, "checkpoint: {}", self.checkpoint);
        let _ = writeln!(out, "dataset:    {}", self.dataset);
        let _ = writeln!(
            out,
            "protocol:   {} (warm-up {})",
            self.protocol, self.warmup
        );
        let _ = writeln!(
            out,
            "{:<name_w$}  {:>6}  {:>10}  {:>8}  {:>7}  {:>8}  {:>8}",
            "sequence", "frames", "BM", "AFS", "SSIM", "MPJPE", "TD"
        );
        let _ = writeln!(out, "{}", "-".repeat(name_w + 60));
        for (name, frames, s) in rows {
            let _ = writeln!(
                out,
                "{:<name_w$}  {:>6}  {:>10.3}  {:>8.3}  {:>7.4}  {:>8.3}  {:>8.3}",
                name, frames, s.bm, s.afs, s.ssim, s.mpjpe, s.trajectory_distance
            );
        }
        out
    }
}

/// Score a generated pose sequence against the aligned ground truth.
pub fn score(
    skel: &Skeleton,
    gen: &[Pose],
    gt: &[Pose],
    heights: &SlideHeights,
    ssim: &SsimOptions,
) -> Result<Scores> {
    if gen.len() != gt.len() {
        return Err(CoreError::Invalid(format!(
            "{} generated frames for {} reference frames",
            gen.len(),
            gt.len()
        )));
    }
    Ok(Scores {
        bm: body_movement(&joint_angle_tracks(gen))?,
        afs: foot_sliding_of(skel, gen, heights)?,
        ssim: motion_ssim(&expmap_channels(gen), &expmap_channels(gt), ssim)?,
        mpjpe: mpjpe(
            &root_relative_positions(skel, gen)?,
            &root_relative_positions(skel, gt)?,
        )?,
        trajectory_distance: trajectory_distance(&root_track(gen), &root_track(gt))?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub warmup: usize,
    pub ik: bool,
    pub heights: SlideHeights,
    pub ssim: SsimOptions,
    /// Score the ground truth against itself instead of synthesizing.
    pub reference: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            warmup: 30,
            ik: false,
            heights: SlideHeights::default(),
            ssim: SsimOptions::default(),
            reference: false,
        }
    }
}

/// Warm up on the first rows, then synthesize the rest of the sequence in
/// mean mode with ground-truth controls. Returns generated and reference
/// poses of the synthesized frames.
pub fn controlled_rollout<T: Real>(
    synth: &Arc<Synthesizer<T>>,
    seq: &MotionSequence,
    warmup: usize,
    ik: bool,
) -> Result<(Vec<Pose>, Vec<Pose>, Vec<[f64; 4]>)> {
    if warmup == 0 || seq.len() <= warmup {
        return Err(CoreError::Invalid(format!(
            "sequence {} has {} frames, warm-up is {warmup}",
            seq.name,
            seq.len()
        )));
    }
    let layout = ControlLayout::new(synth.n_types());
    let cfg = SessionConfig {
        mode: SampleMode::Mean,
        ik,
        warmup,
        ..SessionConfig::default()
    };
    let mut session = Session::new(
        synth.clone(),
        cfg,
        &Warmup::from_sequence(seq, warmup, synth.n_types())?,
    )?;
    let n = seq.len() - warmup;
    let (mut gen, mut contacts) = (Vec::with_capacity(n), Vec::with_capacity(n));
    for k in 0..n {
        let c = ControlRecord::from_vec(&seq.controls[warmup - 1 + k], layout)?;
        let f = session.step(Some(&c))?;
        gen.push(f.pose);
        contacts.push(f.contacts);
    }
    Ok((gen, seq.poses[warmup + 1..].to_vec(), contacts))
}

/// One-step reconstruction: every pose is predicted from the ground-truth
/// history, so errors do not compound.
#[derive(Debug, Clone)]
pub struct Reconstruction {
    pub generated: Vec<Pose>,
    pub reference: Vec<Pose>,
    pub contacts: Vec<[f64; 4]>,
    pub labels: Vec<[f64; 4]>,
}

/// Predict poses `from + 1 ..` of a sequence, each from at most TRL rows of
/// ground-truth history. Contacts are thresholded at probability one half.
pub fn one_step_reconstruction<T: Real>(
    synth: &Synthesizer<T>,
    seq: &Sequence,
    from: usize,
) -> Result<Reconstruction> {
    let m = &seq.motion;
    let trl = synth.trl();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let first = from.max(2);
    if first >= m.len() {
        return Err(CoreError::Invalid(format!(
            "sequence {} has {} rows, reconstruction starts at {first}",
            m.name,
            m.len()
        )));
    }
    let mut out = Reconstruction {
        generated: Vec::new(),
        reference: Vec::new(),
        contacts: Vec::new(),
        labels: Vec::new(),
    };
    for r in first..m.len() {
        let start = r.saturating_sub(trl);
        let clip = make_clip::<T, _>(
            seq,
            &synth.stats,
            &synth.model.config.partition,
            start,
            r - start + 1,
            0.0,
            &mut rng,
        )?;
        let p = synth.model.predict(&clip.input)?;
        let last = p.mean.rows() - 1;
        let z: Vec<f64> = p
            .mean
            .row_slice(last)
            .iter()
            .map(|v| v.to_f64_lossy())
            .collect();
        let f = synth.stats.denormalize_features(&z);
        out.generated.push(apply_frame(&m.poses[r], &f));
        out.reference.push(m.poses[r + 1].clone());
        let logits = p.contact_logits.row_slice(last);
        out.contacts.push(std::array::from_fn(|i| {
            f64::from(u8::from(logits[i].to_f64_lossy() > 0.0))
        }));
        out.labels.push(m.contacts[r]);
    }
    Ok(out)
}

/// Controlled-rollout evaluation of every sequence, in parallel.
pub fn evaluate<T: Real>(
    synth: &Arc<Synthesizer<T>>,
    sequences: &[&MotionSequence],
    cfg: &EvalConfig,
    checkpoint: &str,
    dataset: &str,
) -> Result<MetricReport> {
    let min = cfg.warmup + cfg.ssim.window;
    let scored: Result<Vec<SequenceScores>> = sequences
        .par_iter()
        .map(|seq| {
            if seq.len() < min {
                return Err(CoreError::Invalid(format!(
                    "sequence {} has {} frames, evaluation needs {min}",
                    seq.name,
                    seq.len()
                )));
            }
            let gt = &seq.poses[cfg.warmup + 1..];
            let scores = if cfg.reference {
                score(&synth.skeleton, gt, gt, &cfg.heights, &cfg.ssim)?
            } else {
                let (gen, gt, _) = controlled_rollout(synth, seq, cfg.warmup, cfg.ik)?;
                score(&synth.skeleton, &gen, &gt, &cfg.heights, &cfg.ssim)?
            };
            Ok(SequenceScores {
                name: seq.name.clone(),
                frames: gt.len(),
                scores,
            })
        })
        .collect();
    let protocol = if cfg.reference {
        "ground truth"
    } else {
        "recorded controls, free-running, mean mode"
    };
    Ok(MetricReport::new(
        checkpoint.into(),
        dataset.into(),
        protocol.into(),
        cfg.warmup,
        scored?,
    ))
}
