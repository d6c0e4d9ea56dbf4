//! Several fully linked instances in one process, each with its own
//! archive, engine, audit log and federation node.

use std::path::Path;
use std::sync::Arc;

use crate::archive::{Archive, ArchiveConfig};
use crate::auth::AuditLog;
use crate::clock::Clock;
use crate::workflow::{Engine, EngineConfig};

use super::job::EngineTrainer;
use super::node::{FederationConfig, FederationNode};
use super::transport::InProcessTransport;
use super::FederationError;

pub struct ClusterMember {
    pub endpoint: String,
    pub archive: Arc<Archive>,
    pub engine: Arc<Engine>,
    pub audit: Arc<AuditLog>,
    pub node: Arc<FederationNode>,
}

pub struct LocalCluster {
    pub transport: Arc<InProcessTransport>,
    /// Member 0 holds a link to every other member.
    pub members: Vec<ClusterMember>,
}

impl LocalCluster {
    /// Opens `size` fresh members and links member 0 to each of the others.
    pub fn build(base: &Path, size: usize, clock: Clock) -> Result<LocalCluster, FederationError> {
        let cluster = LocalCluster::build_existing(base, size, clock)?;
        let members = &cluster.members;
        for member in &members[1..] {
            let invite = members[0].node.create_invite()?;
            member.node.link_instances(&members[0].endpoint, &invite.token)?;
        }
        Ok(cluster)
    }

    /// Reopens members under `base` without creating links.
    pub fn build_existing(base: &Path, size: usize, clock: Clock) -> Result<LocalCluster, FederationError> {
        let transport = Arc::new(InProcessTransport::new());
        let mut members = Vec::with_capacity(size);
        for i in 0..size {
            let root = base.join(format!("site{i}"));
            let archive = Arc::new(Archive::open(root.join("archive"), ArchiveConfig::default())?);
            let mut ecfg = EngineConfig::new(root.join("engine"));
            ecfg.worker_count = 2;
            let engine = Arc::new(Engine::open(ecfg, archive.clone())?);
            let audit = Arc::new(AuditLog::open_with_clock(root.join("audit.jsonl"), clock.clone())?);
            let endpoint = format!("inproc://site{i}");
            let mut fcfg = FederationConfig::new(root.join("federation"), &endpoint);
            fcfg.instance_id = Some(format!("site{i}"));
            let node = FederationNode::open(
                fcfg,
                audit.clone(),
                transport.clone(),
                Arc::new(EngineTrainer::new(engine.clone())),
                clock.clone(),
            )?;
            transport.attach(&endpoint, Arc::downgrade(&node));
            members.push(ClusterMember { endpoint, archive, engine, audit, node });
        }
        Ok(LocalCluster { transport, members })
    }

    pub fn coordinator(&self) -> &Arc<FederationNode> {
        &self.members[0].node
    }

    /// Link ids of members 1.., as seen from the coordinator.
    pub fn remote_ids(&self) -> Vec<String> {
        self.members[1..].iter().map(|m| m.node.instance_id().to_string()).collect()
    }

    /// Stores the training table the built-in `local_train` workflow reads.
    pub fn load_training_data(&self, member: usize, csv: &[u8]) -> Result<(), FederationError> {
        self.members[member].archive.store_object("datasets", "train.csv", "text/csv", csv)?;
        Ok(())
    }
}
