//! Command line plumbing and the streaming session service.

pub mod config;
pub mod error;
pub mod protocol;
pub mod registry;
pub mod server;
pub mod steering;
pub mod worker;

pub use error::{Result, ServiceError};
