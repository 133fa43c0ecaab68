//! Procedural locomotion on the canonical skeleton: planned footsteps, leg
//! IK and counter-swinging arms. Used for tests, demos and overfit runs.

use std::f64::consts::PI;

use nalgebra::UnitQuaternion;
use serde::{Deserialize, Serialize};

use crate::bvh::{Pose, RawClip};
use crate::ik::{solve_two_bone, LegChain};
use crate::rot::{rotate_y, yaw_quat, Vec3};
use crate::skeleton::Skeleton;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaitSpec {
    /// Forward speed, cm/s. Zero gives standing idle.
    pub speed: f64,
    /// Yaw rate, rad/s.
    pub turn_rate: f64,
    /// Duration of one full stride (two steps), s.
    pub cycle: f64,
    /// Fraction of the cycle each foot is planted.
    pub stance: f64,
    pub step_height: f64,
    pub hip_height: f64,
    pub arm_swing: f64,
}

impl GaitSpec {
    pub fn walk(speed: f64) -> Self {
        Self {
            speed,
            turn_rate: 0.0,
            cycle: 0.9,
            stance: 0.6,
            step_height: 8.0,
            hip_height: 91.0,
            arm_swing: 0.35,
        }
    }

    pub fn idle() -> Self {
        Self {
            speed: 0.0,
            ..Self::walk(0.0)
        }
    }
}

const ANKLE_HEIGHT: f64 = 8.0;
const FOOT_LATERAL: f64 = 9.0;

fn smoothstep(x: f64) -> f64 {
    let x = x.clamp(0.0, 1.0);
    x * x * (3.0 - 2.0 * x)
}

/// Root ground track sampled every frame.
struct Track {
    pos: Vec<Vec3>,
    yaw: Vec<f64>,
}

fn track(spec: &GaitSpec, frames: usize, dt: f64, start: Vec3, yaw0: f64) -> Track {
    let mut pos = Vec::with_capacity(frames);
    let mut yaw = Vec::with_capacity(frames);
    let (mut p, mut y) = (start, yaw0);
    for _ in 0..frames {
        pos.push(p);
        yaw.push(y);
        let mid = y + 0.5 * spec.turn_rate * dt;
        p += rotate_y(mid, &Vec3::new(0.0, 0.0, spec.speed * dt));
        y += spec.turn_rate * dt;
    }
    Track { pos, yaw }
}

/// Ankle target of one foot at time `t` (s); `side` is +1 left, −1 right.
fn foot_target(spec: &GaitSpec, tr: &Track, dt: f64, t: f64, phase_offset: f64, side: f64) -> Vec3 {
    let plant = |k: f64| {
        let mid_t = (k + phase_offset + 0.5 * spec.stance) * spec.cycle;
        let i = ((mid_t / dt).round().max(0.0) as usize).min(tr.pos.len() - 1);
        let lateral = rotate_y(tr.yaw[i], &Vec3::new(side * FOOT_LATERAL, 0.0, 0.0));
        Vec3::new(
            tr.pos[i].x + lateral.x,
            ANKLE_HEIGHT,
            tr.pos[i].z + lateral.z,
        )
    };
    if spec.speed == 0.0 && spec.turn_rate == 0.0 {
        return plant(0.0);
    }
    let u = t / spec.cycle - phase_offset;
    let k = u.floor();
    let phi = u - k;
    if phi < spec.stance {
        plant(k)
    } else {
        let s = (phi - spec.stance) / (1.0 - spec.stance);
        let from = plant(k);
        let to = plant(k + 1.0);
        let mut p = from + (to - from) * smoothstep(s);
        p.y = ANKLE_HEIGHT + spec.step_height * (PI * s).sin();
        p
    }
}

/// Generate `frames` poses at `fps`, starting at `start` facing `yaw0`.
pub fn generate_gait(spec: &GaitSpec, frames: usize, fps: f64, start: Vec3, yaw0: f64) -> RawClip {
    let skel = Skeleton::canonical();
    let dt = 1.0 / fps;
    let horizon = frames + (3.0 * spec.cycle * fps) as usize + 2;
    let tr = track(spec, horizon, dt, start, yaw0);
    let legs = LegChain::both(&skel).expect("canonical skeleton has legs");
    let idx = |n: &str| skel.index_of(n).unwrap();
    let (l_arm, r_arm) = (idx("LeftArm"), idx("RightArm"));
    let (l_fore, r_fore) = (idx("LeftForeArm"), idx("RightForeArm"));
    let (spine1, neck) = (idx("Spine1"), idx("Neck"));
    let moving = spec.speed != 0.0 || spec.turn_rate != 0.0;

    let mut out = Vec::with_capacity(frames);
    for n in 0..frames {
        let t = n as f64 * dt;
        let gait = if moving {
            2.0 * PI * t / spec.cycle
        } else {
            2.0 * PI * t / 4.0
        };
        let bob = if moving {
            1.2 * (2.0 * gait).cos()
        } else {
            0.4 * gait.sin()
        };
        let root = Vec3::new(tr.pos[n].x, spec.hip_height + bob, tr.pos[n].z);
        let mut pose = Pose::identity(skel.len(), root);
        let lean = if moving {
            0.04 + 0.0005 * spec.speed.min(400.0) / 4.0
        } else {
            0.0
        };
        pose.rotations[0] =
            yaw_quat(tr.yaw[n]) * UnitQuaternion::from_axis_angle(&Vec3::x_axis(), lean);

        let swing = spec.arm_swing
            * if moving {
                gait.sin()
            } else {
                0.05 * gait.sin()
            };
        let down = 75f64.to_radians();
        pose.rotations[l_arm] = UnitQuaternion::from_axis_angle(&Vec3::x_axis(), -swing)
            * UnitQuaternion::from_axis_angle(&Vec3::z_axis(), -down);
        pose.rotations[r_arm] = UnitQuaternion::from_axis_angle(&Vec3::x_axis(), swing)
            * UnitQuaternion::from_axis_angle(&Vec3::z_axis(), down);
        let elbow = 0.3 + 0.1 * swing.abs();
        pose.rotations[l_fore] = UnitQuaternion::from_axis_angle(&Vec3::y_axis(), elbow);
        pose.rotations[r_fore] = UnitQuaternion::from_axis_angle(&Vec3::y_axis(), -elbow);
        pose.rotations[spine1] = UnitQuaternion::from_axis_angle(&Vec3::y_axis(), -0.3 * swing);
        pose.rotations[neck] =
            UnitQuaternion::from_axis_angle(&Vec3::y_axis(), 0.3 * swing - 0.5 * lean);

        for (leg, (offset, side)) in legs.iter().zip([(0.0, 1.0), (0.5, -1.0)]) {
            let target = foot_target(spec, &tr, dt, t, offset, side);
            // Flat foot facing the plant direction.
            let (_, rot) = skel.fk_unchecked(&pose.rotations, &pose.root_position);
            let knee_world = rot[leg.knee];
            pose.rotations[leg.ankle] = knee_world.inverse() * yaw_quat(tr.yaw[n]);
            solve_two_bone(&skel, &mut pose, *leg, &target);
        }
        out.push(pose);
    }
    RawClip::new(skel, out, dt)
}

/// One clip made of consecutive gait segments, each `(spec, frames, type)`,
/// with per-frame one-hot type rows. Segments join where the previous one
/// ended.
pub fn generate_segments(
    segments: &[(GaitSpec, usize, usize)],
    n_types: usize,
    fps: f64,
) -> (RawClip, Vec<Vec<f64>>) {
    let mut frames = Vec::new();
    let mut types = Vec::new();
    let mut start = Vec3::zeros();
    let mut yaw = 0.0;
    let mut skeleton = Skeleton::canonical();
    for &(spec, n, ty) in segments {
        let clip = generate_gait(&spec, n + 1, fps, start, yaw);
        let last = clip.frames[n].clone();
        start = Vec3::new(last.root_position.x, 0.0, last.root_position.z);
        yaw = crate::rot::yaw_tilt(&last.rotations[0]).0;
        frames.extend(clip.frames.into_iter().take(n));
        types.extend(std::iter::repeat_n(
            crate::features::one_hot(ty, n_types),
            n,
        ));
        skeleton = clip.skeleton;
    }
    (RawClip::new(skeleton, frames, 1.0 / fps), types)
}
