//! TOML configuration shared by every command.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tptn_core::metrics::EvalConfig;
use tptn_core::model::ModelConfig;
use tptn_core::synthesis::SessionConfig;
use tptn_core::train::TrainConfig;

use crate::error::{Result, ServiceError};

/// Environment variable naming the default config file.
pub const CONFIG_ENV: &str = "TPTN_CONFIG";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointEntry {
    pub id: String,
    pub path: PathBuf,
    /// Dataset cache whose sequences seed sessions.
    pub warmup: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServeConfig {
    pub bind: String,
    /// Built UI assets served over HTTP on the same port.
    pub static_dir: Option<PathBuf>,
    /// Seconds without client messages before a non-streaming connection
    /// is closed.
    pub idle_timeout_secs: f64,
    pub batch: usize,
    /// Pace output at the model frame rate. Off generates as fast as
    /// possible.
    pub realtime: bool,
    /// Frames between metrics records.
    pub metrics_every: u64,
    pub checkpoints: Vec<CheckpointEntry>,
}

impl Default for ServeConfig {
    fn default() -> Self {
        Self {
            bind: "127.0.0.1:7878".into(),
            static_dir: None,
            idle_timeout_secs: 120.0,
            batch: 10,
            realtime: true,
            metrics_every: 60,
            checkpoints: Vec::new(),
        }
    }
}

impl ServeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.batch > 10 {
            return Err(ServiceError::Config(format!(
                "batch must be 1..=10, got {}",
                self.batch
            )));
        }
        if !(self.idle_timeout_secs > 0.0) {
            return Err(ServiceError::Config(
                "idle_timeout_secs must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub session: SessionConfig,
    pub eval: EvalConfig,
    pub serve: ServeConfig,
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| ServiceError::Config(e.to_string()))
    }

    /// Read `path`, or the file named by `TPTN_CONFIG`, or fall back to
    /// defaults. Relative paths inside the file resolve against its
    /// directory.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let env = std::env::var_os(CONFIG_ENV).map(PathBuf::from);
        let Some(path) = path.map(Path::to_path_buf).or(env) else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(&path)
            .map_err(|e| ServiceError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)
            .map_err(|e| ServiceError::Config(format!("{}: {e}", path.display())))?;
        let dir = path.parent().unwrap_or(Path::new(""));
        cfg.resolve(dir);
        Ok(cfg)
    }

    fn resolve(&mut self, dir: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        };
        if let Some(s) = &mut self.serve.static_dir {
            fix(s);
        }
        for c in &mut self.serve.checkpoints {
            fix(&mut c.path);
            fix(&mut c.warmup);
        }
    }
}
