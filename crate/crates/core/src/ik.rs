//! Analytic two-bone leg IK.

use nalgebra::UnitQuaternion;

use crate::bvh::Pose;
use crate::rot::{Quat, Vec3};
use crate::skeleton::Skeleton;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LegChain {
    pub hip: usize,
    pub knee: usize,
    pub ankle: usize,
}

impl LegChain {
    /// Left and right chains ending at the skeleton's foot joints.
    pub fn both(skel: &Skeleton) -> Option<[LegChain; 2]> {
        let feet = skel.feet?;
        let chain = |ankle: usize| {
            let knee = skel.parents[ankle]?;
            let hip = skel.parents[knee]?;
            Some(LegChain { hip, knee, ankle })
        };
        Some([chain(feet.left_foot)?, chain(feet.right_foot)?])
    }
}

fn rotation_between(from: &Vec3, to: &Vec3) -> Quat {
    UnitQuaternion::rotation_between(from, to).unwrap_or_else(|| {
        // Opposite vectors: turn half way round any perpendicular axis.
        let axis = if from.x.abs() < 0.9 {
            from.cross(&Vec3::x())
        } else {
            from.cross(&Vec3::y())
        };
        UnitQuaternion::from_axis_angle(&nalgebra::Unit::new_normalize(axis), std::f64::consts::PI)
    })
}

/// Move the ankle of `chain` to `target` (world, cm) by rotating hip and
/// knee, keeping the knee in the plane of its current bend and the ankle's
/// world orientation unchanged. Out-of-reach targets are clamped to the leg
/// length. Returns whether the target was reachable.
pub fn solve_two_bone(skel: &Skeleton, pose: &mut Pose, chain: LegChain, target: &Vec3) -> bool {
    solve_two_bone_oriented(skel, pose, chain, target, None)
}

/// As [`solve_two_bone`], but sets the ankle's world orientation to
/// `ankle_world` when given.
pub fn solve_two_bone_oriented(
    skel: &Skeleton,
    pose: &mut Pose,
    chain: LegChain,
    target: &Vec3,
    ankle_world: Option<&Quat>,
) -> bool {
    let (pos, rot) = skel.fk_unchecked(&pose.rotations, &pose.root_position);
    let (a, b) = (pos[chain.hip], pos[chain.knee]);
    let lab = (b - a).norm();
    let lbc = skel.offsets[chain.ankle].norm();
    let to_t = target - a;
    let dist = to_t.norm();
    let eps = 1e-6;
    let reachable = dist <= lab + lbc - eps && dist >= (lab - lbc).abs() + eps;
    let lat = dist.clamp((lab - lbc).abs() + eps, lab + lbc - eps);
    let u = if dist > eps { to_t / dist } else { -Vec3::y() };

    // Pole: current knee, or the hip's forward axis for a straight leg.
    let mut pole = (b - a) - u * (b - a).dot(&u);
    if pole.norm() < 1e-6 * lab.max(1.0) {
        let fwd = rot[chain.hip] * Vec3::z();
        pole = fwd - u * fwd.dot(&u);
    }
    let w = pole.normalize();
    let cos_hip = ((lab * lab + lat * lat - lbc * lbc) / (2.0 * lab * lat)).clamp(-1.0, 1.0);
    let sin_hip = (1.0 - cos_hip * cos_hip).sqrt();
    let knee_new = a + (u * cos_hip + w * sin_hip) * lab;
    let ankle_goal = a + u * lat;

    let parent_rot = skel.parents[chain.hip].map_or_else(Quat::identity, |p| rot[p]);
    let hip_world = rotation_between(&(b - a), &(knee_new - a)) * rot[chain.hip];
    let knee_world_tmp = hip_world * pose.rotations[chain.knee];
    let ankle_dir = knee_world_tmp * skel.offsets[chain.ankle];
    let knee_world = rotation_between(&ankle_dir, &(ankle_goal - knee_new)) * knee_world_tmp;

    let ankle_world = ankle_world.copied().unwrap_or(rot[chain.ankle]);
    pose.rotations[chain.hip] = parent_rot.inverse() * hip_world;
    pose.rotations[chain.knee] = hip_world.inverse() * knee_world;
    pose.rotations[chain.ankle] = knee_world.inverse() * ankle_world;
    reachable
}

/// Ankle world transform held while a foot is planted.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Lock {
    position: Vec3,
    rotation: Quat,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum LegState {
    Free,
    Planted(Lock),
    /// Released `frames` ago; the lock fades out.
    Releasing {
        lock: Lock,
        frames: usize,
    },
}

/// Contact-triggered foot locking across frames.
///
/// A leg is planted while its foot or toe label is at least 0.5. On contact
/// onset the ankle's world position and orientation are locked, which also
/// pins the toe. While planted, two-bone IK holds the lock; after release the
/// correction fades out linearly over `blend_frames` frames.
#[derive(Debug, Clone)]
pub struct FootLocker {
    chains: [LegChain; 2],
    legs: [LegState; 2],
    pub blend_frames: usize,
    pub threshold: f64,
    /// Frames where a locked target was beyond the leg's reach.
    pub clamped: usize,
}

impl FootLocker {
    pub fn new(skel: &Skeleton, blend_frames: usize) -> Option<Self> {
        Some(Self {
            chains: LegChain::both(skel)?,
            legs: [LegState::Free; 2],
            blend_frames,
            threshold: 0.5,
            clamped: 0,
        })
    }

    pub fn reset(&mut self) {
        self.legs = [LegState::Free; 2];
    }

    /// Correct `pose` given the contact labels {lf, lt, rf, rt} of the same
    /// frame. Only the hip, knee and ankle rotations of each leg change.
    pub fn apply(&mut self, skel: &Skeleton, pose: &Pose, contacts: &[f64; 4]) -> Pose {
        let mut out = pose.clone();
        if self.legs.iter().all(|l| *l == LegState::Free)
            && contacts.iter().all(|&c| c < self.threshold)
        {
            return out;
        }
        let (pos, rot) = skel.fk_unchecked(&pose.rotations, &pose.root_position);
        for leg in 0..2 {
            let chain = self.chains[leg];
            let down =
                contacts[2 * leg] >= self.threshold || contacts[2 * leg + 1] >= self.threshold;
            let raw = Lock {
                position: pos[chain.ankle],
                rotation: rot[chain.ankle],
            };
            let (next, goal) = match (self.legs[leg], down) {
                (LegState::Free, false) => (LegState::Free, None),
                (LegState::Free, true) => (LegState::Planted(raw), Some(raw)),
                (LegState::Planted(lock), true) => (LegState::Planted(lock), Some(lock)),
                (LegState::Planted(lock), false) => self.fade(lock, 1, raw),
                (LegState::Releasing { lock, frames }, false) => self.fade(lock, frames + 1, raw),
                (LegState::Releasing { lock, frames }, true) => {
                    // Re-plant where the fading foot currently is.
                    let here = blend(&lock, &raw, self.weight(frames));
                    (LegState::Planted(here), Some(here))
                }
            };
            self.legs[leg] = next;
            if let Some(g) = goal {
                if !solve_two_bone_oriented(skel, &mut out, chain, &g.position, Some(&g.rotation)) {
                    self.clamped += 1;
                    log::debug!("foot lock target out of reach for leg {leg}");
                }
            }
        }
        out
    }

    fn weight(&self, frames: usize) -> f64 {
        1.0 - frames as f64 / (self.blend_frames + 1) as f64
    }

    fn fade(&self, lock: Lock, frames: usize, raw: Lock) -> (LegState, Option<Lock>) {
        if frames > self.blend_frames {
            return (LegState::Free, None);
        }
        (
            LegState::Releasing { lock, frames },
            Some(blend(&lock, &raw, self.weight(frames))),
        )
    }
}

/// `w` of the lock plus `1 − w` of the raw transform.
fn blend(lock: &Lock, raw: &Lock, w: f64) -> Lock {
    Lock {
        position: raw.position + (lock.position - raw.position) * w,
        rotation: raw
            .rotation
            .try_slerp(&lock.rotation, w, 1e-12)
            .unwrap_or(lock.rotation),
    }
}
