//! A running node: the HTTP API and the DIMSE listener over one platform.

use std::net::{SocketAddr, TcpListener};
use std::sync::Arc;
use std::thread::JoinHandle;

use minipacs_core::clock::{self, Clock};
use minipacs_core::dimse::{AssociationConfig, DimseServer};
use minipacs_core::federation::Transport;
use tokio::sync::oneshot;

use crate::config::NodeConfig;
use crate::platform::Platform;
use crate::transport::HttpTransport;
use crate::{api, NodeError};

/// Calling AE placeholder; the provider accepts any calling AE title.
const ANY_CALLING_AE: &str = "ANY-SCU";

pub struct NodeServer {
    platform: Arc<Platform>,
    http_addr: SocketAddr,
    dimse: Option<DimseServer>,
    shutdown: Option<oneshot::Sender<()>>,
    thread: Option<JoinHandle<()>>,
}

fn endpoint_for(addr: SocketAddr) -> String {
    if addr.ip().is_unspecified() {
        format!("http://localhost:{}", addr.port())
    } else {
        format!("http://{addr}")
    }
}

impl NodeServer {
    pub fn start(config: NodeConfig) -> Result<NodeServer, NodeError> {
        NodeServer::start_with(config, Arc::new(HttpTransport::default()), clock::system())
    }

    /// Binds both listeners before opening the platform so the federation
    /// endpoint reflects the bound port.
    pub fn start_with(config: NodeConfig, transport: Arc<dyn Transport>, clock: Clock) -> Result<NodeServer, NodeError> {
        config.validate()?;
        let listener = TcpListener::bind((config.bind_address.as_str(), config.http_port))?;
        let http_addr = listener.local_addr()?;
        let endpoint = config.public_url.clone().unwrap_or_else(|| endpoint_for(http_addr));
        let dimse_bind = format!("{}:{}", config.bind_address, config.dimse_port);
        let platform = Arc::new(Platform::open(config, &endpoint, transport, clock)?);
        let assoc = AssociationConfig::new(&platform.config.ae_title, ANY_CALLING_AE, platform.config.max_pdu_length)?;
        let dimse = DimseServer::bind(&dimse_bind, assoc, platform.instance_sink())?;

        listener.set_nonblocking(true)?;
        let runtime = tokio::runtime::Builder::new_multi_thread()
            .enable_all()
            .thread_name("http-worker")
            .build()?;
        let router = api::router(platform.clone());
        let (tx, rx) = oneshot::channel::<()>();
        let thread = std::thread::Builder::new().name("http-server".into()).spawn(move || {
            runtime.block_on(async move {
                let listener = match tokio::net::TcpListener::from_std(listener) {
                    Ok(l) => l,
                    Err(e) => return tracing::error!(error = %e, "cannot adopt HTTP listener"),
                };
                let shutdown = async {
                    let _ = rx.await;
                };
                if let Err(e) = axum::serve(listener, router).with_graceful_shutdown(shutdown).await {
                    tracing::error!(error = %e, "HTTP server failed");
                }
            });
        })?;
        tracing::info!(http = %http_addr, dimse = %dimse.local_addr(), %endpoint, "node started");
        Ok(NodeServer { platform, http_addr, dimse: Some(dimse), shutdown: Some(tx), thread: Some(thread) })
    }

    pub fn platform(&self) -> &Arc<Platform> {
        &self.platform
    }

    pub fn http_addr(&self) -> SocketAddr {
        self.http_addr
    }

    pub fn dimse_addr(&self) -> SocketAddr {
        self.dimse.as_ref().expect("running").local_addr()
    }

    /// Base URL of the HTTP listener as seen from this host.
    pub fn base_url(&self) -> String {
        endpoint_for(self.http_addr)
    }

    /// Stops both listeners after in-flight requests finish.
    pub fn shutdown(mut self) {
        self.stop();
    }

    fn stop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
        if let Some(d) = self.dimse.take() {
            d.shutdown();
        }
    }
}

impl Drop for NodeServer {
    fn drop(&mut self) {
        self.stop();
    }
}
