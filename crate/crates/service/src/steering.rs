//! Direction/speed/type steering turned into per-frame controls.

use serde::{Deserialize, Serialize};
use tptn_core::features::{one_hot, ControlRecord, RootState, CONTROL_OFFSETS};
use tptn_core::rot::{facing, rotate_y, Vec3};

/// Held user input. Unset fields fall back to the model's prediction.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Steering {
    pub type_id: Option<usize>,
    /// World (x, z); normalized on use.
    pub direction_xz: Option<[f64; 2]>,
    /// cm/s
    pub speed: Option<f64>,
}

/// Speed assumed when only a direction is given, cm/s.
pub const DEFAULT_SPEED: f64 = 120.0;

impl Steering {
    pub fn is_empty(&self) -> bool {
        self.type_id.is_none() && self.direction_xz.is_none() && self.speed.is_none()
    }

    /// Overwrite the fields present in `other`; an empty update clears all.
    pub fn update(&mut self, other: &Steering) {
        if other.is_empty() {
            *self = Steering::default();
            return;
        }
        self.type_id = other.type_id.or(self.type_id);
        self.direction_xz = other.direction_xz.or(self.direction_xz);
        self.speed = other.speed.or(self.speed);
    }

    /// The control to use for the next step, or `None` to let the model's
    /// prediction drive. `base` is the control the session would use.
    pub fn control(
        &self,
        base: &ControlRecord,
        root: &RootState,
        fps: f64,
    ) -> Option<ControlRecord> {
        if self.is_empty() {
            return None;
        }
        let mut c = base.clone();
        if let Some(k) = self.type_id {
            let n = c.types.first().map_or(0, Vec::len);
            for row in &mut c.types {
                *row = one_hot(k, n);
            }
        }
        if self.direction_xz.is_some() || self.speed.is_some() {
            let world = self
                .direction_xz
                .and_then(|d| {
                    let n = d[0].hypot(d[1]);
                    (n > 1e-9).then(|| [d[0] / n, d[1] / n])
                })
                .unwrap_or_else(|| facing(root.yaw));
            let local = rotate_y(-root.yaw, &Vec3::new(world[0], 0.0, world[1]));
            let speed = self.speed.unwrap_or(DEFAULT_SPEED).max(0.0);
            for (k, &off) in CONTROL_OFFSETS.iter().enumerate() {
                let dist = speed * off as f64 / fps;
                c.positions[k] = [local.x * dist, local.z * dist];
                c.directions[k] = [local.x, local.z];
            }
        }
        Some(c)
    }
}
