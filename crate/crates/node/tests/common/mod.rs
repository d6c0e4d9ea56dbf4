//! A node on ephemeral localhost ports and a small HTTP client for it.
#![allow(dead_code)]

use std::collections::BTreeSet;
use std::time::{Duration, Instant};

use minipacs_core::auth::Role;
use minipacs_node::{NodeConfig, NodeServer};
use serde_json::{json, Value};

pub const BOUNDARY: &str = "minipacs-test-boundary-7f3a9c";

pub struct TestNode {
    pub dir: tempfile::TempDir,
    pub server: NodeServer,
}

pub fn config(dir: &std::path::Path) -> NodeConfig {
    let mut cfg = NodeConfig::new(dir.join("data"));
    cfg.http_port = 0;
    cfg.dimse_port = 0;
    cfg.bind_address = "127.0.0.1".into();
    cfg.worker_count = 2;
    cfg
}

pub fn start_node() -> TestNode {
    start_node_with(|_| {})
}

pub fn start_node_with(adjust: impl FnOnce(&mut NodeConfig)) -> TestNode {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(dir.path());
    adjust(&mut cfg);
    let server = NodeServer::start(cfg).unwrap();
    TestNode { dir, server }
}

impl TestNode {
    pub fn anonymous(&self) -> Client {
        Client::new(&self.server.base_url(), None)
    }

    /// Creates the user directly and signs in over HTTP.
    pub fn user(&self, name: &str, roles: &[Role]) -> Client {
        let password = format!("{name}-password");
        self.server
            .platform()
            .auth
            .add_user(name, &password, roles.iter().copied().collect::<BTreeSet<_>>())
            .unwrap();
        self.login(name, &password)
    }

    pub fn login(&self, name: &str, password: &str) -> Client {
        let anon = self.anonymous();
        let (status, body) = anon.post_json("/login", &json!({ "username": name, "password": password }));
        assert_eq!(status, 200, "{body}");
        Client::new(&self.server.base_url(), Some(body["token"].as_str().unwrap().to_string()))
    }

    pub fn audit_len(&self) -> u64 {
        self.server.platform().audit.len()
    }
}

pub struct Client {
    base: String,
    token: Option<String>,
    agent: ureq::Agent,
}

pub struct Reply {
    pub status: u16,
    pub content_type: Option<String>,
    pub body: Vec<u8>,
}

impl Reply {
    pub fn json(&self) -> Value {
        serde_json::from_slice(&self.body).unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&self.body)))
    }
}

impl Client {
    pub fn new(base: &str, token: Option<String>) -> Client {
        let agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(60)))
            .build()
            .into();
        Client { base: format!("{base}/api/v1"), token, agent }
    }

    pub fn token(&self) -> Option<&str> {
        self.token.as_deref()
    }

    fn auth(&self) -> Option<String> {
        self.token.as_ref().map(|t| format!("Bearer {t}"))
    }

    fn finish(resp: Result<ureq::http::Response<ureq::Body>, ureq::Error>) -> Reply {
        let mut resp = resp.unwrap();
        let status = resp.status().as_u16();
        let content_type = resp.headers().get("content-type").and_then(|v| v.to_str().ok()).map(String::from);
        let body = resp.body_mut().with_config().limit(256 * 1024 * 1024).read_to_vec().unwrap();
        Reply { status, content_type, body }
    }

    pub fn get_raw(&self, path: &str) -> Reply {
        let mut req = self.agent.get(format!("{}{path}", self.base));
        if let Some(a) = self.auth() {
            req = req.header("authorization", a);
        }
        Client::finish(req.call())
    }

    pub fn get(&self, path: &str) -> (u16, Value) {
        let r = self.get_raw(path);
        (r.status, r.json())
    }

    pub fn delete(&self, path: &str) -> (u16, Value) {
        let mut req = self.agent.delete(format!("{}{path}", self.base));
        if let Some(a) = self.auth() {
            req = req.header("authorization", a);
        }
        let r = Client::finish(req.call());
        (r.status, r.json())
    }

    pub fn post_bytes(&self, path: &str, content_type: &str, body: &[u8]) -> Reply {
        let mut req = self.agent.post(format!("{}{path}", self.base)).header("content-type", content_type);
        if let Some(a) = self.auth() {
            req = req.header("authorization", a);
        }
        Client::finish(req.send(body))
    }

    pub fn post_json(&self, path: &str, body: &Value) -> (u16, Value) {
        let r = self.post_bytes(path, "application/json", &serde_json::to_vec(body).unwrap());
        (r.status, r.json())
    }

    /// `files` are (filename, bytes), each sent as a `file` part.
    pub fn upload(&self, path: &str, files: &[(&str, &[u8])]) -> (u16, Value) {
        let body = multipart(files);
        let r = self.post_bytes(path, &format!("multipart/form-data; boundary={BOUNDARY}"), &body);
        (r.status, r.json())
    }
}

/// A POST outside the `/api/v1` prefix with explicit headers.
pub fn post_raw(url: &str, headers: &[(&str, String)], body: &[u8]) -> Reply {
    let client = Client::new("", None);
    let mut req = client.agent.post(url);
    for (k, v) in headers {
        req = req.header(*k, v);
    }
    Client::finish(req.send(body))
}

pub fn multipart(files: &[(&str, &[u8])]) -> Vec<u8> {
    let mut body = Vec::new();
    for (name, bytes) in files {
        body.extend_from_slice(format!("--{BOUNDARY}\r\n").as_bytes());
        body.extend_from_slice(
            format!("Content-Disposition: form-data; name=\"file\"; filename=\"{name}\"\r\n").as_bytes(),
        );
        body.extend_from_slice(b"Content-Type: application/octet-stream\r\n\r\n");
        body.extend_from_slice(bytes);
        body.extend_from_slice(b"\r\n");
    }
    body.extend_from_slice(format!("--{BOUNDARY}--\r\n").as_bytes());
    body
}

/// Percent-encodes a query-string value.
pub fn encode(value: &str) -> String {
    form_urlencoded::byte_serialize(value.as_bytes()).collect()
}

/// Polls `f` until it yields a value or `timeout` passes.
pub fn poll<T>(timeout: Duration, mut f: impl FnMut() -> Option<T>) -> T {
    let start = Instant::now();
    loop {
        if let Some(v) = f() {
            return v;
        }
        assert!(start.elapsed() < timeout, "timed out after {timeout:?}");
        std::thread::sleep(Duration::from_millis(20));
    }
}
