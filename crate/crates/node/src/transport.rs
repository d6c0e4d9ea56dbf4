//! Federation requests over HTTP.

use std::collections::BTreeMap;
use std::time::Duration;

use minipacs_core::federation::{FedRequest, FedResponse, FederationError, Transport, DEFAULT_MAX_BODY};

pub struct HttpTransport {
    agent: ureq::Agent,
}

impl HttpTransport {
    pub fn new(timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(timeout))
            .build()
            .into();
        HttpTransport { agent }
    }
}

impl Default for HttpTransport {
    fn default() -> Self {
        HttpTransport::new(Duration::from_secs(30))
    }
}

impl Transport for HttpTransport {
    fn send(&self, endpoint: &str, req: &FedRequest) -> Result<FedResponse, FederationError> {
        let unreachable = |e: ureq::Error| FederationError::EndpointUnreachable(format!("{endpoint}: {e}"));
        if req.method != "POST" {
            return Err(FederationError::InvalidMessage(format!("method {} not supported", req.method)));
        }
        let url = format!("{}{}", endpoint.trim_end_matches('/'), req.path);
        let mut builder = self.agent.post(&url).header("content-type", "application/json");
        for (k, v) in &req.headers {
            builder = builder.header(k.as_str(), v.as_str());
        }
        let mut resp = builder.send(&req.body[..]).map_err(unreachable)?;
        let status = resp.status().as_u16();
        let headers: BTreeMap<String, String> = resp
            .headers()
            .iter()
            .filter_map(|(k, v)| Some((k.as_str().to_ascii_lowercase(), v.to_str().ok()?.to_string())))
            .collect();
        let body = resp
            .body_mut()
            .with_config()
            .limit(DEFAULT_MAX_BODY as u64 + 1)
            .read_to_vec()
            .map_err(unreachable)?;
        Ok(FedResponse { status, headers, body })
    }
}
