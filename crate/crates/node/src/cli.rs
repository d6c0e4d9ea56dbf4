//! The `node` command line.

use std::collections::BTreeSet;
use std::io::{BufRead, IsTerminal, Write};
use std::path::PathBuf;

use clap::{Parser, Subcommand};
use minipacs_core::auth::{Outcome, Role, SYSTEM};
use serde::Serialize;

use crate::config::NodeConfig;
use crate::platform::Platform;
use crate::server::NodeServer;
use crate::NodeError;

#[derive(Debug, Parser)]
#[command(name = "node", version, about = "Imaging research node: archive, workflows, federation")]
pub struct Cli {
    /// Node configuration (JSON).
    #[arg(long, global = true, env = "MINIPACS_CONFIG", default_value = "node.json")]
    pub config: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Runs the HTTP API and the DIMSE listener until interrupted.
    Serve,
    /// Manages local users.
    User {
        #[command(subcommand)]
        command: UserCommand,
    },
    /// Manages extension packages.
    Extension {
        #[command(subcommand)]
        command: ExtensionCommand,
    },
    /// Manages federation links.
    Fed {
        #[command(subcommand)]
        command: FedCommand,
    },
}

#[derive(Debug, Subcommand)]
pub enum UserCommand {
    /// Adds a user; the password is read from the first line of stdin.
    Add {
        name: String,
        #[arg(long = "role", required = true)]
        roles: Vec<String>,
    },
}

#[derive(Debug, Subcommand)]
pub enum ExtensionCommand {
    /// Installs a package archive (.tar.gz).
    Install { file: PathBuf },
}

#[derive(Debug, Subcommand)]
pub enum FedCommand {
    /// Issues a single-use invite token.
    Invite,
    /// Links this node to the peer that issued `token`.
    Link { endpoint: String, token: String },
}

/// The endpoint advertised to peers by administrative commands.
fn advertised_endpoint(cfg: &NodeConfig) -> String {
    cfg.public_url.clone().unwrap_or_else(|| format!("http://localhost:{}", cfg.http_port))
}

fn print<T: Serialize>(out: &mut dyn Write, value: &T) -> Result<(), NodeError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| NodeError::Config(e.to_string()))?;
    writeln!(out, "{text}")?;
    Ok(())
}

fn read_password(input: &mut dyn BufRead) -> Result<String, NodeError> {
    if std::io::stdin().is_terminal() {
        eprint!("password: ");
    }
    let mut line = String::new();
    input.read_line(&mut line)?;
    let password = line.trim_end_matches(['\r', '\n']).to_string();
    if password.is_empty() {
        return Err(NodeError::Config("empty password".into()));
    }
    Ok(password)
}

/// Administrative commands open the data directory themselves and refuse
/// to run while a node holds it. Each appends one audit event.
pub fn run(cli: Cli, input: &mut dyn BufRead, out: &mut dyn Write) -> Result<(), NodeError> {
    let cfg = NodeConfig::load(&cli.config)?;
    match cli.command {
        Command::Serve => serve(cfg),
        Command::User { command: UserCommand::Add { name, roles } } => {
            let roles = roles.iter().map(|r| r.parse::<Role>()).collect::<Result<BTreeSet<_>, _>>()?;
            let password = read_password(input)?;
            let platform = Platform::open_default(cfg.clone(), &advertised_endpoint(&cfg))?;
            let result = platform.auth.add_user(&name, &password, roles);
            audit(&platform, "manage_users", &format!("user:{name}"), result.is_ok())?;
            print(out, &result?)
        }
        Command::Extension { command: ExtensionCommand::Install { file } } => {
            let bytes = std::fs::read(&file)?;
            let platform = Platform::open_default(cfg.clone(), &advertised_endpoint(&cfg))?;
            let result = platform.extensions.install_upload(&bytes);
            audit(&platform, "manage_extensions", "extension:upload", result.is_ok())?;
            print(out, &result?)
        }
        Command::Fed { command: FedCommand::Invite } => {
            let platform = Platform::open_default(cfg.clone(), &advertised_endpoint(&cfg))?;
            let result = platform.federation.create_invite();
            audit(&platform, "manage_federation", "federation:invite", result.is_ok())?;
            print(out, &result?)
        }
        Command::Fed { command: FedCommand::Link { endpoint, token } } => {
            let platform = Platform::open_default(cfg.clone(), &advertised_endpoint(&cfg))?;
            let result = platform.federation.link_instances(&endpoint, &token);
            audit(&platform, "manage_federation", &format!("federation:link:{endpoint}"), result.is_ok())?;
            print(out, &result?)
        }
    }
}

fn audit(platform: &Platform, action: &str, resource: &str, ok: bool) -> Result<(), NodeError> {
    let outcome = if ok { Outcome::Allowed } else { Outcome::Error };
    platform.audit.append(SYSTEM, action, resource, outcome)?;
    Ok(())
}

fn serve(cfg: NodeConfig) -> Result<(), NodeError> {
    let server = NodeServer::start(cfg)?;
    eprintln!("listening: http {} dimse {}", server.http_addr(), server.dimse_addr());
    let runtime = tokio::runtime::Builder::new_current_thread().enable_all().build()?;
    runtime.block_on(async {
        #[cfg(unix)]
        {
            let mut term = tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate())?;
            tokio::select! {
                r = tokio::signal::ctrl_c() => r,
                _ = term.recv() => Ok(()),
            }
        }
        #[cfg(not(unix))]
        tokio::signal::ctrl_c().await
    })?;
    tracing::info!("shutting down");
    server.shutdown();
    Ok(())
}
