use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub const DEFAULT_ADDR: &str = "127.0.0.1:8080";

/// Service settings, read from a JSON file and overridden by flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    /// Dataset directory (holds `meta.json`).
    pub data_dir: Option<PathBuf>,
    /// Checkpoint to load at start-up and to write after training.
    pub model_path: Option<PathBuf>,
    pub addr: String,
    /// Built UI bundle served at `/`.
    pub ui_dir: Option<PathBuf>,
    /// Allowed CORS origins; empty allows any origin.
    pub cors_origins: Vec<String>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            data_dir: None,
            model_path: None,
            addr: DEFAULT_ADDR.into(),
            ui_dir: None,
            cors_origins: Vec::new(),
        }
    }
}

impl ServiceConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn socket_addr(&self) -> anyhow::Result<SocketAddr> {
        self.addr
            .parse()
            .map_err(|e| anyhow::anyhow!("invalid listen address `{}`: {e}", self.addr))
    }
}
