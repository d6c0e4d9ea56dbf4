//! How federation requests reach a peer.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::{Mutex, RwLock, Weak};

use super::node::FederationNode;
use super::FederationError;

pub const INSTANCE_HEADER: &str = "x-fed-instance";
pub const INVITE_HEADER: &str = "x-fed-invite";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FedRequest {
    pub method: String,
    pub path: String,
    /// Lower-case names.
    pub headers: BTreeMap<String, String>,
    pub body: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FedResponse {
    pub status: u16,
    pub headers: BTreeMap<String, String>,
    pub body: Vec<u8>,
}

pub trait Transport: Send + Sync {
    /// Delivers `req` to the instance at `endpoint`. Only failure to reach
    /// the peer is an error; peer-side failures come back as statuses.
    fn send(&self, endpoint: &str, req: &FedRequest) -> Result<FedResponse, FederationError>;
}

fn wire_bytes(out: &mut Vec<u8>, first_line: &str, headers: &BTreeMap<String, String>, body: &[u8]) {
    out.extend_from_slice(first_line.as_bytes());
    out.extend_from_slice(b"\r\n");
    for (k, v) in headers {
        out.extend_from_slice(format!("{k}: {v}\r\n").as_bytes());
    }
    out.extend_from_slice(b"\r\n");
    out.extend_from_slice(body);
}

/// Connects nodes living in one process. Every request and response is
/// appended to a capture buffer in HTTP-like framing.
#[derive(Default)]
pub struct InProcessTransport {
    nodes: RwLock<BTreeMap<String, Weak<FederationNode>>>,
    offline: RwLock<BTreeSet<String>>,
    capture: Mutex<Vec<u8>>,
}

impl InProcessTransport {
    pub fn new() -> Self {
        InProcessTransport::default()
    }

    pub fn attach(&self, endpoint: &str, node: Weak<FederationNode>) {
        self.nodes.write().expect("nodes lock").insert(endpoint.to_string(), node);
    }

    pub fn set_offline(&self, endpoint: &str, offline: bool) {
        let mut set = self.offline.write().expect("offline lock");
        if offline {
            set.insert(endpoint.to_string());
        } else {
            set.remove(endpoint);
        }
    }

    pub fn captured(&self) -> Vec<u8> {
        self.capture.lock().expect("capture lock").clone()
    }
}

impl Transport for InProcessTransport {
    fn send(&self, endpoint: &str, req: &FedRequest) -> Result<FedResponse, FederationError> {
        let unreachable = || FederationError::EndpointUnreachable(endpoint.to_string());
        if self.offline.read().expect("offline lock").contains(endpoint) {
            return Err(unreachable());
        }
        let node = self
            .nodes
            .read()
            .expect("nodes lock")
            .get(endpoint)
            .and_then(Weak::upgrade)
            .ok_or_else(unreachable)?;
        {
            let mut cap = self.capture.lock().expect("capture lock");
            wire_bytes(&mut cap, &format!("{} {}{} HTTP/1.1", req.method, endpoint, req.path), &req.headers, &req.body);
        }
        let resp = node.handle(req);
        wire_bytes(
            &mut self.capture.lock().expect("capture lock"),
            &format!("HTTP/1.1 {}", resp.status),
            &resp.headers,
            &resp.body,
        );
        Ok(resp)
    }
}
