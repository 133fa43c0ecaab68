//! Two-part transformer network for controllable character motion:
//! BVH I/O, motion features, the model and its losses, training,
//! autoregressive synthesis and evaluation metrics.

pub mod bvh;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod features;
pub mod ik;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod rot;
pub mod skeleton;
pub mod synthesis;
pub mod synthetic;
pub mod train;

pub use error::{CoreError, Result};
