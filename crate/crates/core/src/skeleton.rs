//! Kinematic tree, forward kinematics and mirror pairing.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::rot::{Quat, Vec3};

/// Indices of the four contact joints.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FootJoints {
    pub left_foot: usize,
    pub left_toe: usize,
    pub right_foot: usize,
    pub right_toe: usize,
}

impl FootJoints {
    /// In label order {lf, lt, rf, rt}.
    pub fn as_array(&self) -> [usize; 4] {
        [
            self.left_foot,
            self.left_toe,
            self.right_foot,
            self.right_toe,
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Skeleton {
    pub joint_names: Vec<String>,
    /// `None` for the root. Parents always precede their children.
    pub parents: Vec<Option<usize>>,
    /// Offset from the parent joint, cm.
    pub offsets: Vec<Vec3>,
    pub end_sites: Vec<Option<Vec3>>,
    pub mirror_pairs: Vec<(usize, usize)>,
    pub feet: Option<FootJoints>,
}

pub const CANONICAL_JOINTS: [&str; 23] = [
    "Hips",
    "Spine",
    "Spine1",
    "Spine2",
    "Spine3",
    "Neck",
    "Head",
    "LeftShoulder",
    "LeftArm",
    "LeftForeArm",
    "LeftHand",
    "RightShoulder",
    "RightArm",
    "RightForeArm",
    "RightHand",
    "LeftUpLeg",
    "LeftLeg",
    "LeftFoot",
    "LeftToeBase",
    "RightUpLeg",
    "RightLeg",
    "RightFoot",
    "RightToeBase",
];

/// Root height of the canonical skeleton in its rest pose, cm.
pub const CANONICAL_HIP_HEIGHT: f64 = 97.0;

impl Skeleton {
    /// Validates the tree, derives mirror pairs from "Left"/"Right" name
    /// prefixes and locates the foot and toe joints when present.
    pub fn new(
        joint_names: Vec<String>,
        parents: Vec<Option<usize>>,
        offsets: Vec<Vec3>,
        end_sites: Vec<Option<Vec3>>,
    ) -> Result<Self> {
        let n = joint_names.len();
        if n == 0 || parents.len() != n || offsets.len() != n || end_sites.len() != n {
            return Err(CoreError::Skeleton(
                "joint arrays have inconsistent lengths".into(),
            ));
        }
        if parents[0].is_some() || parents.iter().skip(1).any(Option::is_none) {
            return Err(CoreError::Skeleton("joint 0 must be the only root".into()));
        }
        for (i, p) in parents.iter().enumerate().skip(1) {
            if p.is_some_and(|p| p >= i) {
                return Err(CoreError::Skeleton(format!(
                    "joint {} has parent after it",
                    joint_names[i]
                )));
            }
        }
        let mut skel = Self {
            joint_names,
            parents,
            offsets,
            end_sites,
            mirror_pairs: Vec::new(),
            feet: None,
        };
        skel.mirror_pairs = skel.pairs_by_prefix();
        let find = |name: &str| skel.index_of(name);
        skel.feet = match (
            find("LeftFoot"),
            find("LeftToeBase"),
            find("RightFoot"),
            find("RightToeBase"),
        ) {
            (Some(left_foot), Some(left_toe), Some(right_foot), Some(right_toe)) => {
                Some(FootJoints {
                    left_foot,
                    left_toe,
                    right_foot,
                    right_toe,
                })
            }
            _ => None,
        };
        Ok(skel)
    }

    /// The 23-joint layout used throughout: Y up, character facing +Z,
    /// left side on +X, centimeters.
    pub fn canonical() -> Self {
        let idx = |name: &str| CANONICAL_JOINTS.iter().position(|&n| n == name).unwrap();
        let spec: [(&str, &str, [f64; 3]); 22] = [
            ("Spine", "Hips", [0.0, 10.0, 0.0]),
            ("Spine1", "Spine", [0.0, 10.0, 0.0]),
            ("Spine2", "Spine1", [0.0, 10.0, 0.0]),
            ("Spine3", "Spine2", [0.0, 10.0, 0.0]),
            ("Neck", "Spine3", [0.0, 12.0, 0.0]),
            ("Head", "Neck", [0.0, 10.0, 0.0]),
            ("LeftShoulder", "Spine3", [3.0, 8.0, 0.0]),
            ("LeftArm", "LeftShoulder", [15.0, 0.0, 0.0]),
            ("LeftForeArm", "LeftArm", [28.0, 0.0, 0.0]),
            ("LeftHand", "LeftForeArm", [25.0, 0.0, 0.0]),
            ("RightShoulder", "Spine3", [-3.0, 8.0, 0.0]),
            ("RightArm", "RightShoulder", [-15.0, 0.0, 0.0]),
            ("RightForeArm", "RightArm", [-28.0, 0.0, 0.0]),
            ("RightHand", "RightForeArm", [-25.0, 0.0, 0.0]),
            ("LeftUpLeg", "Hips", [9.0, -5.0, 0.0]),
            ("LeftLeg", "LeftUpLeg", [0.0, -42.0, 0.0]),
            ("LeftFoot", "LeftLeg", [0.0, -42.0, 0.0]),
            ("LeftToeBase", "LeftFoot", [0.0, -6.0, 13.0]),
            ("RightUpLeg", "Hips", [-9.0, -5.0, 0.0]),
            ("RightLeg", "RightUpLeg", [0.0, -42.0, 0.0]),
            ("RightFoot", "RightLeg", [0.0, -42.0, 0.0]),
            ("RightToeBase", "RightFoot", [0.0, -6.0, 13.0]),
        ];
        let mut parents = vec![None; 23];
        let mut offsets = vec![Vec3::zeros(); 23];
        for (name, parent, off) in spec {
            let i = idx(name);
            parents[i] = Some(idx(parent));
            offsets[i] = Vec3::from(off);
        }
        let mut end_sites = vec![None; 23];
        end_sites[idx("Head")] = Some(Vec3::new(0.0, 15.0, 0.0));
        end_sites[idx("LeftHand")] = Some(Vec3::new(15.0, 0.0, 0.0));
        end_sites[idx("RightHand")] = Some(Vec3::new(-15.0, 0.0, 0.0));
        end_sites[idx("LeftToeBase")] = Some(Vec3::new(0.0, 0.0, 6.0));
        end_sites[idx("RightToeBase")] = Some(Vec3::new(0.0, 0.0, 6.0));
        Self::new(
            CANONICAL_JOINTS.iter().map(|s| s.to_string()).collect(),
            parents,
            offsets,
            end_sites,
        )
        .expect("canonical skeleton is valid")
    }

    pub fn len(&self) -> usize {
        self.joint_names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.joint_names.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.joint_names.iter().position(|n| n == name)
    }

    pub fn children(&self, j: usize) -> impl Iterator<Item = usize> + '_ {
        self.parents
            .iter()
            .enumerate()
            .filter(move |(_, p)| **p == Some(j))
            .map(|(i, _)| i)
    }

    fn pairs_by_prefix(&self) -> Vec<(usize, usize)> {
        self.joint_names
            .iter()
            .enumerate()
            .filter_map(|(i, name)| {
                let rest = name.strip_prefix("Left")?;
                self.index_of(&format!("Right{rest}")).map(|j| (i, j))
            })
            .collect()
    }

    /// Replace the mirror pairing with explicit `(left, right)` name pairs.
    pub fn with_mirror_map(mut self, pairs: &[(String, String)]) -> Result<Self> {
        let mut out = Vec::with_capacity(pairs.len());
        for (l, r) in pairs {
            let li = self
                .index_of(l)
                .ok_or_else(|| CoreError::Skeleton(format!("mirror map: unknown joint {l}")))?;
            let ri = self
                .index_of(r)
                .ok_or_else(|| CoreError::Skeleton(format!("mirror map: unknown joint {r}")))?;
            out.push((li, ri));
        }
        self.mirror_pairs = out;
        Ok(self)
    }

    /// Joint index → its mirror partner (itself for joints on the midline).
    /// Fails when a "Left*" or "Right*" joint has no partner.
    pub fn mirror_permutation(&self) -> Result<Vec<usize>> {
        let mut perm: Vec<usize> = (0..self.len()).collect();
        let mut paired = vec![false; self.len()];
        for &(l, r) in &self.mirror_pairs {
            perm[l] = r;
            perm[r] = l;
            paired[l] = true;
            paired[r] = true;
        }
        for (i, name) in self.joint_names.iter().enumerate() {
            if !paired[i] && (name.starts_with("Left") || name.starts_with("Right")) {
                return Err(CoreError::MissingMirrorPair(name.clone()));
            }
        }
        Ok(perm)
    }

    /// World positions and world rotations of every joint.
    pub fn forward_kinematics(
        &self,
        rotations: &[Quat],
        root_position: &Vec3,
    ) -> Result<(Vec<Vec3>, Vec<Quat>)> {
        if rotations.len() != self.len() {
            return Err(CoreError::Skeleton(format!(
                "pose has {} rotations for {} joints",
                rotations.len(),
                self.len()
            )));
        }
        for (i, q) in rotations.iter().enumerate() {
            let n = q.quaternion().norm();
            if (n - 1.0).abs() > 1e-6 {
                return Err(CoreError::NonUnitQuaternion {
                    joint: self.joint_names[i].clone(),
                    norm: n,
                });
            }
        }
        Ok(self.fk_unchecked(rotations, root_position))
    }

    pub(crate) fn fk_unchecked(
        &self,
        rotations: &[Quat],
        root_position: &Vec3,
    ) -> (Vec<Vec3>, Vec<Quat>) {
        let n = self.len();
        let mut pos = Vec::with_capacity(n);
        let mut rot: Vec<Quat> = Vec::with_capacity(n);
        for j in 0..n {
            match self.parents[j] {
                None => {
                    pos.push(*root_position);
                    rot.push(rotations[j]);
                }
                Some(p) => {
                    let world = rot[p] * rotations[j];
                    pos.push(pos[p] + rot[p] * self.offsets[j]);
                    rot.push(world);
                }
            }
        }
        (pos, rot)
    }

    /// Joint positions of the rest pose relative to the root.
    pub fn rest_positions(&self) -> Vec<Vec3> {
        self.fk_unchecked(&vec![Quat::identity(); self.len()], &Vec3::zeros())
            .0
    }

    /// Parse a sidecar mirror map: one "LeftName RightName" pair per line,
    /// blank lines and `#` comments ignored.
    pub fn parse_mirror_map(text: &str) -> Result<Vec<(String, String)>> {
        let mut out = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let mut it = line.split_whitespace();
            match (it.next(), it.next(), it.next()) {
                (Some(l), Some(r), None) => out.push((l.to_string(), r.to_string())),
                _ => {
                    return Err(CoreError::Skeleton(format!(
                        "mirror map line {}: expected two names",
                        i + 1
                    )))
                }
            }
        }
        Ok(out)
    }
}
