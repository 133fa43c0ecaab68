//! Rotation helpers on top of nalgebra: exponential maps, yaw/tilt
//! decomposition about the up axis, and Euler conversion for BVH channels.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Quaternion, Unit, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

pub type Vec3 = Vector3<f64>;
pub type Quat = UnitQuaternion<f64>;

/// Wrap an angle to (−π, π].
pub fn wrap_angle(a: f64) -> f64 {
    let mut r = (a + PI).rem_euclid(2.0 * PI) - PI;
    if r <= -PI {
        r += 2.0 * PI;
    }
    r
}

/// Axis-angle vector (axis × angle, angle in [0, π]).
pub fn quat_to_expmap(q: &Quat) -> Vec3 {
    let q = q.quaternion();
    let (w, v) = if q.w < 0.0 {
        (-q.w, -q.imag())
    } else {
        (q.w, q.imag())
    };
    let s = v.norm();
    if s < 1e-12 {
        // sin(θ/2)/(θ/2) → 1
        return v * 2.0;
    }
    let theta = 2.0 * s.atan2(w);
    v * (theta / s)
}

pub fn expmap_to_quat(r: &Vec3) -> Quat {
    let theta = r.norm();
    if theta < 1e-12 {
        return UnitQuaternion::from_quaternion(Quaternion::new(
            1.0,
            r.x * 0.5,
            r.y * 0.5,
            r.z * 0.5,
        ));
    }
    UnitQuaternion::from_axis_angle(&Unit::new_unchecked(r / theta), theta)
}

/// Rotation by `yaw` radians about +Y.
pub fn yaw_quat(yaw: f64) -> Quat {
    UnitQuaternion::from_axis_angle(&Vector3::y_axis(), yaw)
}

/// Rotate a vector by `yaw` about +Y.
pub fn rotate_y(yaw: f64, v: &Vec3) -> Vec3 {
    let (s, c) = yaw.sin_cos();
    Vec3::new(c * v.x + s * v.z, v.y, -s * v.x + c * v.z)
}

/// Split `q = twist(yaw) · swing` where the swing has no component about Y.
/// Returns the yaw angle and the swing as a 2-D exp-map (x, z).
pub fn yaw_tilt(q: &Quat) -> (f64, [f64; 2]) {
    let c = q.quaternion();
    let n = (c.w * c.w + c.j * c.j).sqrt();
    let yaw = if n < 1e-12 {
        0.0
    } else {
        wrap_angle(2.0 * c.j.atan2(c.w))
    };
    let swing = yaw_quat(-yaw) * q;
    let e = quat_to_expmap(&swing);
    (yaw, [e.x, e.z])
}

pub fn from_yaw_tilt(yaw: f64, tilt: [f64; 2]) -> Quat {
    yaw_quat(yaw) * expmap_to_quat(&Vec3::new(tilt[0], 0.0, tilt[1]))
}

/// Facing direction on the ground plane for a yaw angle: (sin ψ, cos ψ).
pub fn facing(yaw: f64) -> [f64; 2] {
    let (s, c) = yaw.sin_cos();
    [s, c]
}

/// Rotation-channel orders accepted in BVH files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EulerOrder {
    /// `R = Rz · Ry · Rx`
    Zyx,
    /// `R = Rz · Rx · Ry`
    Zxy,
}

impl EulerOrder {
    pub fn channel_names(self) -> [&'static str; 3] {
        match self {
            EulerOrder::Zyx => ["Zrotation", "Yrotation", "Xrotation"],
            EulerOrder::Zxy => ["Zrotation", "Xrotation", "Yrotation"],
        }
    }

    pub fn from_channels(names: &[&str]) -> Option<Self> {
        match names {
            ["Zrotation", "Yrotation", "Xrotation"] => Some(EulerOrder::Zyx),
            ["Zrotation", "Xrotation", "Yrotation"] => Some(EulerOrder::Zxy),
            _ => None,
        }
    }

    /// Quaternion from angles in degrees, listed in channel order.
    pub fn to_quat(self, deg: [f64; 3]) -> Quat {
        let [a, b, c] = deg.map(f64::to_radians);
        let rz = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), a);
        match self {
            EulerOrder::Zyx => {
                rz * UnitQuaternion::from_axis_angle(&Vector3::y_axis(), b)
                    * UnitQuaternion::from_axis_angle(&Vector3::x_axis(), c)
            }
            EulerOrder::Zxy => {
                rz * UnitQuaternion::from_axis_angle(&Vector3::x_axis(), b)
                    * UnitQuaternion::from_axis_angle(&Vector3::y_axis(), c)
            }
        }
    }

    /// Angles in degrees, in channel order.
    pub fn from_quat(self, q: &Quat) -> [f64; 3] {
        let m: Matrix3<f64> = q.to_rotation_matrix().into_inner();
        let r = |i: usize, j: usize| m[(i, j)];
        let near_lock = |s: f64| s.abs() > 1.0 - 1e-12;
        let (a, b, c) = match self {
            EulerOrder::Zyx => {
                let sb = (-r(2, 0)).clamp(-1.0, 1.0);
                let b = sb.asin();
                if near_lock(sb) {
                    // Only a ± c is determined; put it all in a.
                    (f64::atan2(-r(0, 1), r(1, 1)), b, 0.0)
                } else {
                    (r(1, 0).atan2(r(0, 0)), b, r(2, 1).atan2(r(2, 2)))
                }
            }
            EulerOrder::Zxy => {
                let sb = r(2, 1).clamp(-1.0, 1.0);
                let b = sb.asin();
                if near_lock(sb) {
                    (r(1, 0).atan2(r(0, 0)), b, 0.0)
                } else {
                    ((-r(0, 1)).atan2(r(1, 1)), b, (-r(2, 0)).atan2(r(2, 2)))
                }
            }
        };
        [a.to_degrees(), b.to_degrees(), c.to_degrees()]
    }
}
