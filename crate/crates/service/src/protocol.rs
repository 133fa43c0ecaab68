//! JSON-lines wire protocol. Every record is one UTF-8 JSON object with a
//! `kind` tag, terminated by `\n` on raw sockets or carried as one text
//! message on web sockets.

use serde::{Deserialize, Serialize};
use tptn_core::bvh::Pose;
use tptn_core::skeleton::Skeleton;
use tptn_core::synthesis::{SampleMode, TrajectorySpec};

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ClientMessage {
    Hello {
        checkpoint_id: String,
    },
    Start {
        /// Name of a warm-up sequence; the first one when absent.
        #[serde(default)]
        warmup_source: Option<String>,
        #[serde(default)]
        mode: SampleMode,
        #[serde(default = "yes")]
        ik: bool,
        #[serde(default)]
        seed: u64,
    },
    /// Present fields replace the held steering; a message with none of
    /// them hands control back to the model's own trajectory prediction.
    Control {
        #[serde(default)]
        type_id: Option<usize>,
        /// World ground-plane direction (x, z).
        #[serde(default)]
        direction_xz: Option<[f64; 2]>,
        /// cm/s
        #[serde(default)]
        speed: Option<f64>,
    },
    Trajectory {
        spec: TrajectorySpec,
    },
    Stop,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireSkeleton {
    pub joint_names: Vec<String>,
    pub parents: Vec<Option<usize>>,
    pub offsets: Vec<[f64; 3]>,
}

impl From<&Skeleton> for WireSkeleton {
    fn from(s: &Skeleton) -> Self {
        Self {
            joint_names: s.joint_names.clone(),
            parents: s.parents.clone(),
            offsets: s.offsets.iter().map(|o| [o.x, o.y, o.z]).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireFrame {
    pub index: u64,
    /// Seconds since the session's first generated frame.
    pub t: f64,
    pub root_position: [f64; 3],
    /// Local joint rotations as (w, x, y, z).
    pub rotations: Vec<[f64; 4]>,
    pub contacts: [f64; 4],
}

impl WireFrame {
    pub fn new(index: u64, t: f64, pose: &Pose, contacts: [f64; 4]) -> Self {
        let p = pose.root_position;
        Self {
            index,
            t,
            root_position: [p.x, p.y, p.z],
            rotations: pose
                .rotations
                .iter()
                .map(|q| {
                    let c = q.quaternion();
                    [c.w, c.i, c.j, c.k]
                })
                .collect(),
            contacts,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ServerMessage {
    Ready {
        skeleton: WireSkeleton,
        type_names: Vec<String>,
        trl: usize,
        fps: f64,
        warmup_sources: Vec<String>,
    },
    /// Acknowledges `request`; its effect starts at frame `frame`.
    Ack {
        request: String,
        frame: u64,
    },
    Frames {
        batch: Vec<WireFrame>,
    },
    Metrics {
        /// Generation rate, frames per second of compute.
        fps: f64,
        /// Batch duration plus generation time of the last batch.
        latency_ms: f64,
        /// How far the last batch was behind its due time.
        late_ms: f64,
        frames: u64,
    },
    Error {
        code: String,
        message: String,
    },
}

impl ServerMessage {
    pub fn error(code: &str, message: impl Into<String>) -> Self {
        Self::Error {
            code: code.into(),
            message: message.into(),
        }
    }

    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("server messages always serialize")
    }
}
