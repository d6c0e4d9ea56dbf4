//! One imaging research node: the HTTP API, the DIMSE listener and the
//! administrative CLI over the services of `minipacs-core`.

pub mod api;
pub mod cli;
pub mod config;
pub mod error;
pub mod platform;
pub mod server;
pub mod transport;

pub use config::NodeConfig;
pub use error::{ApiError, ErrorBody, NodeError};
pub use platform::Platform;
pub use server::NodeServer;
pub use transport::HttpTransport;
