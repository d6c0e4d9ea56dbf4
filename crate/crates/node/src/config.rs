//! The node configuration file.

use std::path::{Path, PathBuf};

use minipacs_core::dimse::{DEFAULT_AE_TITLE, DEFAULT_PDU_LENGTH, DEFAULT_PORT};
use serde::{Deserialize, Serialize};

use crate::NodeError;

pub const DEFAULT_HTTP_PORT: u16 = 8080;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeConfig {
    #[serde(default = "default_http_port")]
    pub http_port: u16,
    #[serde(default = "default_dimse_port")]
    pub dimse_port: u16,
    #[serde(default = "default_ae_title")]
    pub ae_title: String,
    /// Relative paths resolve against the config file's directory.
    pub data_dir: PathBuf,
    #[serde(default = "default_worker_count")]
    pub worker_count: usize,
    #[serde(default = "default_bind")]
    pub bind_address: String,
    /// Base URL peers use for federation; derived from the HTTP listener
    /// when absent.
    #[serde(default)]
    pub public_url: Option<String>,
    /// Directory holding an extension registry `index.json`.
    #[serde(default)]
    pub registry_dir: Option<PathBuf>,
    #[serde(default = "default_pdu")]
    pub max_pdu_length: u32,
}

fn default_http_port() -> u16 {
    DEFAULT_HTTP_PORT
}

fn default_dimse_port() -> u16 {
    DEFAULT_PORT
}

fn default_ae_title() -> String {
    DEFAULT_AE_TITLE.to_string()
}

fn default_worker_count() -> usize {
    std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
}

fn default_bind() -> String {
    "0.0.0.0".to_string()
}

fn default_pdu() -> u32 {
    DEFAULT_PDU_LENGTH
}

impl NodeConfig {
    pub fn new(data_dir: impl Into<PathBuf>) -> Self {
        NodeConfig {
            http_port: DEFAULT_HTTP_PORT,
            dimse_port: DEFAULT_PORT,
            ae_title: default_ae_title(),
            data_dir: data_dir.into(),
            worker_count: default_worker_count(),
            bind_address: default_bind(),
            public_url: None,
            registry_dir: None,
            max_pdu_length: DEFAULT_PDU_LENGTH,
        }
    }

    pub fn from_json(text: &str) -> Result<Self, NodeError> {
        let cfg: NodeConfig = serde_json::from_str(text).map_err(|e| NodeError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, NodeError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| NodeError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = NodeConfig::from_json(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        if cfg.data_dir.is_relative() {
            cfg.data_dir = base.join(&cfg.data_dir);
        }
        if let Some(dir) = cfg.registry_dir.as_mut().filter(|d| d.is_relative()) {
            *dir = base.join(&*dir);
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), NodeError> {
        let ae = self.ae_title.trim();
        if ae.is_empty() || ae.len() > 16 || !ae.bytes().all(|b| (0x20..0x7f).contains(&b) && b != b'\\') {
            return Err(NodeError::Config(format!("invalid ae_title {:?}", self.ae_title)));
        }
        if self.worker_count == 0 {
            return Err(NodeError::Config("worker_count must be at least 1".into()));
        }
        if let Some(url) = &self.public_url {
            if !(url.starts_with("http://") || url.starts_with("https://")) {
                return Err(NodeError::Config(format!("public_url {url:?} is not an http(s) URL")));
            }
        }
        Ok(())
    }
}
