//! Storage and verification service class provider.

use std::collections::BTreeMap;
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use crate::dicom::{serialize_part10, DicomDataset, FileMeta, TransferSyntax};

use super::assoc::{accept_association, AssociationConfig, AssociationDecision};
use super::command::{CommandField, STATUS_OUT_OF_RESOURCES, STATUS_SUCCESS};
use super::pdu::{read_pdu, write_pdu, Abort, ContextResult, Pdu};
use super::stream::{fragment, MessageAssembler, ReceivedMessage};
use super::DimseError;

/// Largest A-ASSOCIATE-RQ payload accepted before negotiation.
const ASSOCIATE_RQ_LIMIT: usize = 64 * 1024;

/// Destination for instances received over C-STORE.
pub trait InstanceSink: Send + Sync {
    /// Receives a complete Part-10 file. An `Err` is reported to the peer as
    /// an out-of-resources failure.
    fn store(&self, sop_instance_uid: &str, part10: Vec<u8>) -> Result<(), String>;
}

/// Outcome of one inbound association.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AssociationSummary {
    pub peer: Option<SocketAddr>,
    pub calling_ae: Option<String>,
    pub accepted: bool,
    /// (result, source, reason) when the association was rejected.
    pub rejected: Option<(u8, u8, u8)>,
    pub echoes: usize,
    pub stored: Vec<String>,
    pub store_failures: usize,
    pub released: bool,
    /// Set when the association ended through an abort or error.
    pub error: Option<String>,
}

/// Serves one association to completion on `stream`.
pub fn scp_serve(mut stream: TcpStream, cfg: &AssociationConfig, sink: &dyn InstanceSink) -> AssociationSummary {
    let mut summary = AssociationSummary {
        peer: stream.peer_addr().ok(),
        ..Default::default()
    };
    if let Err(e) = serve(&mut stream, cfg, sink, &mut summary) {
        tracing::warn!(peer = ?summary.peer, error = %e, "association ended abnormally");
        if matches!(e, DimseError::ProtocolViolation(_) | DimseError::IdleTimeout | DimseError::PduTooLarge { .. }) {
            let _ = write_pdu(&mut stream, &Pdu::Abort(Abort { source: 2, reason: 0 }));
        }
        summary.error = Some(e.to_string());
    }
    let _ = stream.shutdown(std::net::Shutdown::Both);
    summary
}

fn serve(
    stream: &mut TcpStream,
    cfg: &AssociationConfig,
    sink: &dyn InstanceSink,
    summary: &mut AssociationSummary,
) -> Result<(), DimseError> {
    stream.set_read_timeout(Some(cfg.association_request_timeout))?;
    let rq = match read_pdu(stream, ASSOCIATE_RQ_LIMIT)? {
        Pdu::AssociateRq(rq) => rq,
        other => {
            return Err(DimseError::ProtocolViolation(format!(
                "{} received before association",
                other.name()
            )))
        }
    };
    summary.calling_ae = Some(rq.calling_ae.clone());
    let ac = match accept_association(&rq, cfg) {
        AssociationDecision::Reject(rj) => {
            summary.rejected = Some((rj.result, rj.source, rj.reason));
            write_pdu(stream, &Pdu::AssociateRj(rj))?;
            return Ok(());
        }
        AssociationDecision::Accept(ac) => ac,
    };
    let send_limit = ac.user_info.max_pdu_length;
    let accepted: BTreeMap<u8, String> = ac
        .presentation_contexts
        .iter()
        .filter(|pc| pc.result == ContextResult::Accepted)
        .map(|pc| (pc.id, pc.transfer_syntax.clone()))
        .collect();
    let abstracts: BTreeMap<u8, String> = rq
        .presentation_contexts
        .iter()
        .map(|pc| (pc.id, pc.abstract_syntax.clone()))
        .collect();
    write_pdu(stream, &Pdu::AssociateAc(ac))?;
    summary.accepted = true;
    tracing::info!(calling = %rq.calling_ae, contexts = accepted.len(), "association accepted");

    stream.set_read_timeout(Some(cfg.idle_timeout))?;
    let mut assembler = MessageAssembler::new(accepted);
    loop {
        let pdu = match read_pdu(stream, cfg.max_pdu_length as usize) {
            Ok(pdu) => pdu,
            Err(DimseError::Timeout) => return Err(DimseError::IdleTimeout),
            Err(e) => return Err(e),
        };
        match pdu {
            Pdu::PDataTf(p) => {
                for msg in assembler.push(p)? {
                    let status = handle(&msg, &assembler, &abstracts, sink, summary)?;
                    let rsp = msg.command.response(status).encode()?;
                    for pdu in fragment(msg.context_id, true, &rsp, send_limit) {
                        write_pdu(stream, &pdu)?;
                    }
                }
            }
            Pdu::ReleaseRq => {
                write_pdu(stream, &Pdu::ReleaseRp)?;
                summary.released = true;
                return Ok(());
            }
            Pdu::Abort(a) => {
                return Err(DimseError::PeerAborted {
                    origin: a.source,
                    reason: a.reason,
                })
            }
            other => {
                return Err(DimseError::ProtocolViolation(format!(
                    "unexpected {} during association",
                    other.name()
                )))
            }
        }
    }
}

fn handle(
    msg: &ReceivedMessage,
    assembler: &MessageAssembler,
    abstracts: &BTreeMap<u8, String>,
    sink: &dyn InstanceSink,
    summary: &mut AssociationSummary,
) -> Result<u16, DimseError> {
    match msg.command.command_field {
        CommandField::CEchoRq => {
            summary.echoes += 1;
            Ok(STATUS_SUCCESS)
        }
        CommandField::CStoreRq => {
            let ts_uid = assembler
                .transfer_syntax(msg.context_id)
                .expect("assembler only yields accepted contexts");
            let ts = TransferSyntax::from_uid(ts_uid)?;
            let instance = msg.command.affected_sop_instance.clone().unwrap_or_default();
            let class = abstracts
                .get(&msg.context_id)
                .cloned()
                .unwrap_or_else(|| msg.command.affected_sop_class.clone());
            let mut file = serialize_part10(&FileMeta::new(ts, &class, &instance), &DicomDataset::new())?;
            file.extend_from_slice(msg.dataset.as_deref().unwrap_or_default());
            match sink.store(&instance, file) {
                Ok(()) => {
                    summary.stored.push(instance);
                    Ok(STATUS_SUCCESS)
                }
                Err(reason) => {
                    tracing::warn!(%instance, %reason, "store rejected by sink");
                    summary.store_failures += 1;
                    Ok(STATUS_OUT_OF_RESOURCES)
                }
            }
        }
        other => Err(DimseError::ProtocolViolation(format!(
            "response {:04X} sent to provider",
            other.code()
        ))),
    }
}

/// Threaded listener serving each association on its own thread.
pub struct DimseServer {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    summaries: Arc<Mutex<Vec<AssociationSummary>>>,
    handle: Option<JoinHandle<()>>,
}

impl DimseServer {
    pub fn bind(addr: &str, cfg: AssociationConfig, sink: Arc<dyn InstanceSink>) -> Result<Self, DimseError> {
        let listener = TcpListener::bind(addr)?;
        let local = listener.local_addr()?;
        let stop = Arc::new(AtomicBool::new(false));
        let summaries = Arc::new(Mutex::new(Vec::new()));
        let cfg = Arc::new(cfg);
        let handle = {
            let stop = stop.clone();
            let summaries = summaries.clone();
            std::thread::Builder::new()
                .name("dimse-listener".into())
                .spawn(move || {
                    let mut workers = Vec::new();
                    for conn in listener.incoming() {
                        if stop.load(Ordering::SeqCst) {
                            break;
                        }
                        let Ok(conn) = conn else { continue };
                        let (cfg, sink, summaries) = (cfg.clone(), sink.clone(), summaries.clone());
                        workers.push(std::thread::spawn(move || {
                            let summary = scp_serve(conn, &cfg, sink.as_ref());
                            summaries.lock().expect("summary lock").push(summary);
                        }));
                        workers.retain(|w: &JoinHandle<()>| !w.is_finished());
                    }
                    for w in workers {
                        let _ = w.join();
                    }
                })?
        };
        Ok(DimseServer {
            addr: local,
            stop,
            summaries,
            handle: Some(handle),
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// Summaries of every association completed so far.
    pub fn summaries(&self) -> Vec<AssociationSummary> {
        self.summaries.lock().expect("summary lock").clone()
    }

    /// Stops accepting and waits for in-flight associations to finish.
    pub fn shutdown(mut self) {
        self.stop_inner();
    }

    fn stop_inner(&mut self) {
        if let Some(handle) = self.handle.take() {
            self.stop.store(true, Ordering::SeqCst);
            let _ = TcpStream::connect(self.addr);
            let _ = handle.join();
        }
    }
}

impl Drop for DimseServer {
    fn drop(&mut self) {
        self.stop_inner();
    }
}
