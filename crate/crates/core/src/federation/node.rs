//! One instance's federation endpoint: links, invites and the signed
//! request handler shared by every transport.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock, Weak};
use std::time::Duration;

use chrono::{DateTime, Utc};
use rand::RngCore;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::auth::{AuditLog, Outcome};
use crate::clock::Clock;

use super::envelope::{sign_envelope, verify_envelope, ReplayCache, SharedSecret, SignedEnvelope, SIGNATURE_HEADER};
use super::job::{JobSlot, LocalTrainer};
use super::message::{guard_message, FedMessage, GuardVerdict, SovereigntyPolicy};
use super::transport::{FedRequest, FedResponse, Transport, INSTANCE_HEADER, INVITE_HEADER};
use super::FederationError;

pub const HANDSHAKE_PATH: &str = "/fed/v1/handshake";
pub const INVITE_LIFETIME_MINUTES: i64 = 15;
pub const DEFAULT_ROUND_TIMEOUT: Duration = Duration::from_secs(120);
const RESPONSE_METHOD: &str = "RESPONSE";

#[derive(Debug, Clone)]
pub struct FederationConfig {
    /// Holds identity, links, invites and job records.
    pub data_dir: PathBuf,
    /// Base URL peers use to reach this instance.
    pub endpoint: String,
    /// Generated and persisted on first start when absent.
    pub instance_id: Option<String>,
    /// Workflows this instance runs on behalf of peers.
    pub capabilities: BTreeSet<String>,
    pub policy: SovereigntyPolicy,
    pub round_timeout: Duration,
}

impl FederationConfig {
    pub fn new(data_dir: impl Into<PathBuf>, endpoint: &str) -> Self {
        FederationConfig {
            data_dir: data_dir.into(),
            endpoint: endpoint.to_string(),
            instance_id: None,
            capabilities: BTreeSet::from(["local_train".to_string()]),
            policy: SovereigntyPolicy::default(),
            round_timeout: DEFAULT_ROUND_TIMEOUT,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstanceLink {
    pub local_instance_id: String,
    pub remote_instance_id: String,
    pub remote_endpoint: String,
    pub shared_secret: SharedSecret,
    /// Workflows the remote will execute for us.
    pub capabilities: BTreeSet<String>,
    pub established_at: DateTime<Utc>,
}

/// A link without its secret. Links are addressed by the remote id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinkView {
    pub link_id: String,
    pub local_instance_id: String,
    pub remote_instance_id: String,
    pub remote_endpoint: String,
    pub capabilities: BTreeSet<String>,
    pub established_at: DateTime<Utc>,
}

impl InstanceLink {
    pub fn view(&self) -> LinkView {
        LinkView {
            link_id: self.remote_instance_id.clone(),
            local_instance_id: self.local_instance_id.clone(),
            remote_instance_id: self.remote_instance_id.clone(),
            remote_endpoint: self.remote_endpoint.clone(),
            capabilities: self.capabilities.clone(),
            established_at: self.established_at,
        }
    }
}

/// Returned once to the administrator who created it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Invite {
    pub invite_id: String,
    pub token: String,
    pub expires_at: DateTime<Utc>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct InviteRecord {
    invite_id: String,
    token: String,
    created_at: DateTime<Utc>,
    expires_at: DateTime<Utc>,
    used: bool,
}

fn invite_id_of(token: &[u8]) -> String {
    hex::encode(&Sha256::digest(token)[..16])
}

fn handshake_key(token: &[u8]) -> SharedSecret {
    SharedSecret::derive(token, "minipacs-fed-handshake", &[])
}

fn link_secret(token: &[u8], salt: &[u8]) -> SharedSecret {
    SharedSecret::derive(token, "minipacs-fed-link", salt)
}

fn valid_instance_id(id: &str) -> bool {
    (1..=64).contains(&id.len()) && id.bytes().all(|b| b.is_ascii_alphanumeric() || matches!(b, b'.' | b'_' | b'-'))
}

fn join_caps(caps: &BTreeSet<String>) -> String {
    caps.iter().cloned().collect::<Vec<_>>().join(",")
}

fn split_caps(s: &str) -> BTreeSet<String> {
    s.split(',').map(str::trim).filter(|c| !c.is_empty()).map(String::from).collect()
}

pub(crate) fn write_json_atomic<T: Serialize>(path: &Path, value: &T) -> Result<(), FederationError> {
    let dir = path.parent().expect("file has a parent");
    fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    serde_json::to_writer_pretty(&mut tmp, value).map_err(std::io::Error::from)?;
    tmp.as_file().sync_data()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de> + Default>(path: &Path) -> Result<T, FederationError> {
    match fs::read(path) {
        Ok(bytes) => serde_json::from_slice(&bytes)
            .map_err(|e| FederationError::Io(std::io::Error::new(std::io::ErrorKind::InvalidData, e))),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(T::default()),
        Err(e) => Err(e.into()),
    }
}

pub struct FederationNode {
    me: Weak<FederationNode>,
    pub(crate) cfg: FederationConfig,
    pub(crate) instance_id: String,
    links: RwLock<BTreeMap<String, InstanceLink>>,
    invites: Mutex<BTreeMap<String, InviteRecord>>,
    replay: ReplayCache,
    pub(crate) audit: Arc<AuditLog>,
    pub(crate) clock: Clock,
    pub(crate) transport: Arc<dyn Transport>,
    pub(crate) trainer: Arc<dyn LocalTrainer>,
    pub(crate) jobs: Mutex<BTreeMap<String, Arc<JobSlot>>>,
}

impl std::fmt::Debug for FederationNode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FederationNode").field("instance_id", &self.instance_id).finish()
    }
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct Identity {
    instance_id: Option<String>,
}

impl FederationNode {
    pub fn open(
        cfg: FederationConfig,
        audit: Arc<AuditLog>,
        transport: Arc<dyn Transport>,
        trainer: Arc<dyn LocalTrainer>,
        clock: Clock,
    ) -> Result<Arc<FederationNode>, FederationError> {
        fs::create_dir_all(cfg.data_dir.join("jobs"))?;
        let identity_path = cfg.data_dir.join("identity.json");
        let stored: Identity = read_json(&identity_path)?;
        let instance_id = match (&cfg.instance_id, stored.instance_id) {
            (Some(id), _) => id.clone(),
            (None, Some(id)) => id,
            (None, None) => {
                let mut b = [0u8; 8];
                rand::thread_rng().fill_bytes(&mut b);
                format!("inst-{}", hex::encode(b))
            }
        };
        if !valid_instance_id(&instance_id) {
            return Err(FederationError::InvalidMessage(format!("invalid instance id {instance_id:?}")));
        }
        write_json_atomic(&identity_path, &Identity { instance_id: Some(instance_id.clone()) })?;
        let links: Vec<InstanceLink> = read_json(&cfg.data_dir.join("links.json"))?;
        let invites: Vec<InviteRecord> = read_json(&cfg.data_dir.join("invites.json"))?;
        let node = Arc::new_cyclic(|me| FederationNode {
            me: me.clone(),
            instance_id,
            links: RwLock::new(links.into_iter().map(|l| (l.remote_instance_id.clone(), l)).collect()),
            invites: Mutex::new(invites.into_iter().map(|i| (i.invite_id.clone(), i)).collect()),
            replay: ReplayCache::new(),
            audit,
            clock,
            transport,
            trainer,
            jobs: Mutex::new(BTreeMap::new()),
            cfg,
        });
        node.load_jobs()?;
        Ok(node)
    }

    pub(crate) fn self_arc(&self) -> Arc<FederationNode> {
        self.me.upgrade().expect("node is alive while serving")
    }

    pub fn instance_id(&self) -> &str {
        &self.instance_id
    }

    pub fn endpoint(&self) -> &str {
        &self.cfg.endpoint
    }

    pub fn capabilities(&self) -> &BTreeSet<String> {
        &self.cfg.capabilities
    }

    pub(crate) fn now(&self) -> DateTime<Utc> {
        (self.clock)()
    }

    pub fn links(&self) -> Vec<LinkView> {
        self.links.read().expect("links lock").values().map(InstanceLink::view).collect()
    }

    /// The full link including its secret.
    pub fn link(&self, id: &str) -> Option<InstanceLink> {
        self.links.read().expect("links lock").get(id).cloned()
    }

    fn persist_links(&self, links: &BTreeMap<String, InstanceLink>) -> Result<(), FederationError> {
        write_json_atomic(&self.cfg.data_dir.join("links.json"), &links.values().collect::<Vec<_>>())
    }

    fn persist_invites(&self, invites: &BTreeMap<String, InviteRecord>) -> Result<(), FederationError> {
        write_json_atomic(&self.cfg.data_dir.join("invites.json"), &invites.values().collect::<Vec<_>>())
    }

    /// Issues a single-use invite valid for 15 minutes.
    pub fn create_invite(&self) -> Result<Invite, FederationError> {
        let mut raw = [0u8; 32];
        rand::thread_rng().fill_bytes(&mut raw);
        let token = hex::encode(raw);
        let invite_id = invite_id_of(token.as_bytes());
        let created_at = self.now();
        let expires_at = created_at + chrono::Duration::minutes(INVITE_LIFETIME_MINUTES);
        let mut invites = self.invites.lock().expect("invites lock");
        invites.insert(
            invite_id.clone(),
            InviteRecord { invite_id: invite_id.clone(), token: token.clone(), created_at, expires_at, used: false },
        );
        self.persist_invites(&invites)?;
        Ok(Invite { invite_id, token, expires_at })
    }

    pub(crate) fn audit_event(&self, principal: &str, action: &str, resource: &str, outcome: Outcome) {
        if let Err(e) = self.audit.append(principal, action, resource, outcome) {
            tracing::error!(error = %e, "audit append failed");
        }
    }

    /// Applies the sovereignty policy; denials are audited.
    pub fn guard(&self, body: &[u8], context: &str) -> Result<FedMessage, FederationError> {
        match guard_message(body, &self.cfg.policy) {
            GuardVerdict::Allow(m) => Ok(m),
            GuardVerdict::Deny(reason) => {
                self.audit_event("federation", "fed.guard", &format!("{context}: {reason}"), Outcome::Denied);
                Err(FederationError::GuardViolation(reason))
            }
        }
    }

    /// Sends a signed, guarded request and verifies the signed reply.
    pub(crate) fn call(
        &self,
        endpoint: &str,
        path: &str,
        key: &SharedSecret,
        scope: &str,
        extra: &[(&str, &str)],
        msg: &FedMessage,
    ) -> Result<(u16, FedMessage), FederationError> {
        let body = msg.to_bytes();
        self.guard(&body, &format!("outbound {path}"))?;
        let env = sign_envelope(key, "POST", path, &body, self.now().timestamp());
        let mut headers = BTreeMap::from([
            (SIGNATURE_HEADER.to_string(), env.header_value()),
            (INSTANCE_HEADER.to_string(), self.instance_id.clone()),
            ("content-type".to_string(), "application/json".to_string()),
        ]);
        for (k, v) in extra {
            headers.insert(k.to_string(), v.to_string());
        }
        let req = FedRequest { method: "POST".into(), path: path.into(), headers, body };
        let resp = self.transport.send(endpoint, &req)?;
        let Some(sig) = resp.headers.get(SIGNATURE_HEADER) else {
            if resp.status < 400 {
                return Err(FederationError::BadSignature);
            }
            // Peers that could not identify our key reply unsigned.
            return Err(match self.guard(&resp.body, &format!("inbound reply {path}")) {
                Ok(FedMessage::Control { action, args }) if action == "error" => FederationError::from_remote(
                    resp.status,
                    args.get("error_code").map_or("Unknown", String::as_str),
                    args.get("message").map_or("", String::as_str),
                ),
                _ => FederationError::Remote { status: resp.status, code: "Unknown".into(), message: String::new() },
            });
        };
        let renv = SignedEnvelope::from_parts(RESPONSE_METHOD, path, sig, resp.body)?;
        verify_envelope(key, &renv, self.now().timestamp(), &self.replay, &format!("response:{scope}"))?;
        let reply = self.guard(&renv.body, &format!("inbound reply {path}"))?;
        if resp.status >= 400 {
            let (code, message) = match &reply {
                FedMessage::Control { action, args } if action == "error" => (
                    args.get("error_code").cloned().unwrap_or_default(),
                    args.get("message").cloned().unwrap_or_default(),
                ),
                _ => ("Unknown".to_string(), String::new()),
            };
            return Err(FederationError::from_remote(resp.status, &code, &message));
        }
        Ok((resp.status, reply))
    }

    /// Redeems an invite issued by the instance at `endpoint` and stores
    /// the resulting link.
    pub fn link_instances(&self, endpoint: &str, token: &str) -> Result<LinkView, FederationError> {
        let token_bytes = token.trim().as_bytes();
        let invite_id = invite_id_of(token_bytes);
        let key = handshake_key(token_bytes);
        let msg = FedMessage::control(
            "handshake",
            &[
                ("instance_id", &self.instance_id),
                ("endpoint", &self.cfg.endpoint),
                ("capabilities", &join_caps(&self.cfg.capabilities)),
            ],
        );
        let (_, reply) = self.call(
            endpoint,
            HANDSHAKE_PATH,
            &key,
            &format!("invite:{invite_id}"),
            &[(INVITE_HEADER, &invite_id)],
            &msg,
        )?;
        let FedMessage::Control { action, args } = reply else {
            return Err(FederationError::InvalidMessage("handshake reply is not a control message".into()));
        };
        let field = |k: &str| args.get(k).cloned().ok_or_else(|| FederationError::InvalidMessage(format!("handshake reply lacks {k}")));
        if action != "handshake_ok" {
            return Err(FederationError::InvalidMessage(format!("unexpected handshake reply {action:?}")));
        }
        let remote_id = field("instance_id")?;
        if !valid_instance_id(&remote_id) || remote_id == self.instance_id {
            return Err(FederationError::InvalidMessage(format!("bad remote instance id {remote_id:?}")));
        }
        let salt = hex::decode(field("salt")?).map_err(|_| FederationError::InvalidMessage("bad salt".into()))?;
        let link = InstanceLink {
            local_instance_id: self.instance_id.clone(),
            remote_instance_id: remote_id.clone(),
            remote_endpoint: endpoint.to_string(),
            shared_secret: link_secret(token_bytes, &salt),
            capabilities: split_caps(&field("capabilities")?),
            established_at: self.now(),
        };
        let view = link.view();
        let mut links = self.links.write().expect("links lock");
        links.insert(remote_id, link);
        self.persist_links(&links)?;
        Ok(view)
    }

    fn accept_handshake(&self, invite_id: &str, msg: FedMessage) -> Result<FedMessage, FederationError> {
        let FedMessage::Control { action, args } = msg else {
            return Err(FederationError::InvalidMessage("handshake must be a control message".into()));
        };
        let field = |k: &str| args.get(k).cloned().ok_or_else(|| FederationError::InvalidMessage(format!("handshake lacks {k}")));
        if action != "handshake" {
            return Err(FederationError::InvalidMessage(format!("unexpected action {action:?}")));
        }
        let remote_id = field("instance_id")?;
        let endpoint = field("endpoint")?;
        if !valid_instance_id(&remote_id) || remote_id == self.instance_id {
            return Err(FederationError::InvalidMessage(format!("bad instance id {remote_id:?}")));
        }
        let mut salt = [0u8; 16];
        rand::thread_rng().fill_bytes(&mut salt);
        let token = {
            let mut invites = self.invites.lock().expect("invites lock");
            let inv = invites.get_mut(invite_id).ok_or(FederationError::UnknownInvite)?;
            if inv.used {
                return Err(FederationError::InviteAlreadyUsed);
            }
            if self.now() > inv.expires_at {
                return Err(FederationError::InviteExpired);
            }
            inv.used = true;
            let token = inv.token.clone();
            if let Err(e) = self.persist_invites(&invites) {
                invites.get_mut(invite_id).expect("present").used = false;
                return Err(e);
            }
            token
        };
        let link = InstanceLink {
            local_instance_id: self.instance_id.clone(),
            remote_instance_id: remote_id.clone(),
            remote_endpoint: endpoint,
            shared_secret: link_secret(token.as_bytes(), &salt),
            capabilities: split_caps(&field("capabilities").unwrap_or_default()),
            established_at: self.now(),
        };
        {
            let mut links = self.links.write().expect("links lock");
            links.insert(remote_id.clone(), link);
            self.persist_links(&links)?;
        }
        self.audit_event(&format!("peer:{remote_id}"), "fed.link", &format!("link:{remote_id}"), Outcome::Allowed);
        Ok(FedMessage::control(
            "handshake_ok",
            &[
                ("instance_id", &self.instance_id),
                ("salt", &hex::encode(salt)),
                ("capabilities", &join_caps(&self.cfg.capabilities)),
            ],
        ))
    }

    fn request_key(&self, req: &FedRequest) -> Result<(String, SharedSecret), FederationError> {
        if req.path == HANDSHAKE_PATH {
            let id = req.headers.get(INVITE_HEADER).ok_or(FederationError::UnknownInvite)?;
            let invites = self.invites.lock().expect("invites lock");
            let inv = invites.get(id).ok_or(FederationError::UnknownInvite)?;
            Ok((format!("invite:{id}"), handshake_key(inv.token.as_bytes())))
        } else {
            let id = req.headers.get(INSTANCE_HEADER).ok_or(FederationError::UnknownLink(String::new()))?;
            let link = self.link(id).ok_or_else(|| FederationError::UnknownLink(id.clone()))?;
            Ok((format!("link:{id}"), link.shared_secret))
        }
    }

    fn respond(&self, key: Option<(&str, &SharedSecret)>, path: &str, status: u16, msg: &FedMessage) -> FedResponse {
        let mut body = msg.to_bytes();
        let mut status = status;
        if self.guard(&body, &format!("outbound reply {path}")).is_err() {
            status = 500;
            body = FedMessage::control("error", &[("error_code", "GuardViolation"), ("message", "reply withheld")]).to_bytes();
        }
        let mut headers = BTreeMap::from([("content-type".to_string(), "application/json".to_string())]);
        if let Some((_, key)) = key {
            let env = sign_envelope(key, RESPONSE_METHOD, path, &body, self.now().timestamp());
            headers.insert(SIGNATURE_HEADER.to_string(), env.header_value());
        }
        FedResponse { status, headers, body }
    }

    fn error_message(e: &FederationError) -> FedMessage {
        FedMessage::control("error", &[("error_code", e.code()), ("message", &e.to_string())])
    }

    /// Serves one federation request.
    pub fn handle(&self, req: &FedRequest) -> FedResponse {
        let (scope, key) = match self.request_key(req) {
            Ok(k) => k,
            Err(e) => {
                self.audit_event("anonymous", "fed.verify", &format!("{} {}: {}", req.method, req.path, e.code()), Outcome::Denied);
                return self.respond(None, &req.path, e.http_status(), &Self::error_message(&e));
            }
        };
        let result = self.verified(req, &scope, &key);
        match result {
            Ok((status, msg)) => self.respond(Some((&scope, &key)), &req.path, status, &msg),
            Err(e) => {
                if matches!(e, FederationError::BadSignature | FederationError::ClockSkew | FederationError::ReplayDetected) {
                    self.audit_event(&format!("peer:{scope}"), "fed.verify", &format!("{}: {}", req.path, e.code()), Outcome::Denied);
                }
                // Unauthenticated callers learn nothing signed.
                let key = (!matches!(e, FederationError::BadSignature)).then_some((scope.as_str(), &key));
                self.respond(key, &req.path, e.http_status(), &Self::error_message(&e))
            }
        }
    }

    fn verified(&self, req: &FedRequest, scope: &str, key: &SharedSecret) -> Result<(u16, FedMessage), FederationError> {
        let header = req.headers.get(SIGNATURE_HEADER).ok_or(FederationError::BadSignature)?;
        let env = SignedEnvelope::from_parts(&req.method, &req.path, header, req.body.clone())?;
        verify_envelope(key, &env, self.now().timestamp(), &self.replay, scope)?;
        let msg = match self.guard(&env.body, &format!("inbound {}", req.path)) {
            Ok(m) => m,
            Err(e) => {
                self.fail_job_for_path(&req.path, &e);
                return Err(e);
            }
        };
        if req.method != "POST" {
            return Err(FederationError::InvalidMessage(format!("method {} not allowed", req.method)));
        }
        if req.path == HANDSHAKE_PATH {
            let invite_id = scope.trim_start_matches("invite:");
            return self.accept_handshake(invite_id, msg).map(|m| (200, m));
        }
        let peer = scope.trim_start_matches("link:");
        let parts: Vec<&str> = req.path.trim_start_matches('/').split('/').collect();
        match parts.as_slice() {
            ["fed", "v1", "jobs", job, "round", r, "params"] => {
                let round: u32 = r.parse().map_err(|_| FederationError::InvalidMessage("bad round".into()))?;
                self.accept_params(peer, job, round, msg).map(|m| (202, m))
            }
            ["fed", "v1", "jobs", job, "round", r, "result"] => {
                let round: u32 = r.parse().map_err(|_| FederationError::InvalidMessage("bad round".into()))?;
                self.accept_result(peer, job, round, msg).map(|m| (200, m))
            }
            _ => Err(FederationError::NotFound(req.path.clone())),
        }
    }
}
