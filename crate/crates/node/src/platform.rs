//! Every primary service of one node, opened over a single data directory.

use std::fs::{self, File};
use std::path::Path;
use std::sync::Arc;

use minipacs_core::archive::{Archive, ArchiveConfig};
use minipacs_core::auth::{AuditLog, AuthService, Outcome, SYSTEM};
use minipacs_core::clock::{self, Clock};
use minipacs_core::dimse::InstanceSink;
use minipacs_core::extension::{DirRegistry, ExtensionManager, RegistrySource};
use minipacs_core::federation::{EngineTrainer, FederationConfig, FederationNode, Transport};
use minipacs_core::workflow::{Engine, EngineConfig};

use crate::config::NodeConfig;
use crate::NodeError;

const LOCK_FILE: &str = "node.lock";

pub struct Platform {
    pub config: NodeConfig,
    pub archive: Arc<Archive>,
    pub engine: Arc<Engine>,
    pub audit: Arc<AuditLog>,
    pub auth: Arc<AuthService>,
    pub extensions: Arc<ExtensionManager>,
    pub federation: Arc<FederationNode>,
    /// Held for the platform's lifetime; one process per data directory.
    _lock: File,
}

impl std::fmt::Debug for Platform {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Platform").field("data_dir", &self.config.data_dir).finish()
    }
}

impl Platform {
    /// `endpoint` is the base URL peers use to reach this node.
    pub fn open(
        config: NodeConfig,
        endpoint: &str,
        transport: Arc<dyn Transport>,
        clock: Clock,
    ) -> Result<Platform, NodeError> {
        config.validate()?;
        let data = config.data_dir.clone();
        fs::create_dir_all(&data)?;
        let lock = File::options().create(true).truncate(false).write(true).open(data.join(LOCK_FILE))?;
        lock.try_lock().map_err(|_| NodeError::Locked(data.display().to_string()))?;

        let audit = Arc::new(AuditLog::open_with_clock(data.join("audit.jsonl"), clock.clone())?);
        let auth = Arc::new(AuthService::open_with_clock(data.join("users.json"), audit.clone(), clock.clone())?);
        let archive = Arc::new(Archive::open(data.join("archive"), ArchiveConfig::default())?);
        let engine_cfg = EngineConfig { worker_count: config.worker_count, ..EngineConfig::new(data.join("engine")) };
        let engine = Arc::new(Engine::open(engine_cfg, archive.clone())?);
        let registry = config
            .registry_dir
            .as_ref()
            .map(|dir| Arc::new(DirRegistry::new(dir)) as Arc<dyn RegistrySource>);
        let extensions =
            Arc::new(ExtensionManager::open(data.join("extensions"), engine.clone(), registry, clock.clone())?);
        let federation = FederationNode::open(
            FederationConfig::new(data.join("federation"), endpoint),
            audit.clone(),
            transport,
            Arc::new(EngineTrainer::new(engine.clone())),
            clock,
        )?;
        Ok(Platform { config, archive, engine, audit, auth, extensions, federation, _lock: lock })
    }

    /// Opens with the system clock and the HTTP federation transport.
    pub fn open_default(config: NodeConfig, endpoint: &str) -> Result<Platform, NodeError> {
        Platform::open(config, endpoint, Arc::new(crate::transport::HttpTransport::default()), clock::system())
    }

    pub fn data_dir(&self) -> &Path {
        &self.config.data_dir
    }

    /// Feeds C-STORE instances into the archive; each store is audited.
    pub fn instance_sink(&self) -> Arc<dyn InstanceSink> {
        Arc::new(ArchiveSink { archive: self.archive.clone(), audit: self.audit.clone() })
    }
}

struct ArchiveSink {
    archive: Arc<Archive>,
    audit: Arc<AuditLog>,
}

impl InstanceSink for ArchiveSink {
    fn store(&self, sop_instance_uid: &str, part10: Vec<u8>) -> Result<(), String> {
        let result = self.archive.ingest_part10(&part10);
        let outcome = if result.is_ok() { Outcome::Allowed } else { Outcome::Error };
        if let Err(e) = self.audit.append(SYSTEM, "ingest", &format!("instance:{sop_instance_uid}"), outcome) {
            tracing::error!(error = %e, "audit append failed");
            return Err(e.to_string());
        }
        result.map(|_| ()).map_err(|e| e.to_string())
    }
}
