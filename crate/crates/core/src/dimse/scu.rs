//! Storage and verification service class user.

use std::collections::BTreeMap;
use std::net::{TcpStream, ToSocketAddrs};

use crate::dicom::{read_dataset, split_part10, write_dataset, TransferSyntax, EXPLICIT_VR_LITTLE_ENDIAN, IMPLICIT_VR_LITTLE_ENDIAN};

use super::assoc::AssociationConfig;
use super::command::{CommandField, DimseMessage, VERIFICATION_SOP_CLASS};
use super::pdu::{
    read_pdu, write_pdu, Abort, AssociateRq, ContextResult, Pdu, PresentationContextRq, UserInformation,
    APPLICATION_CONTEXT, PROTOCOL_VERSION,
};
use super::stream::{fragment, MessageAssembler, ReceivedMessage};
use super::DimseError;
use crate::dicom::IMPLEMENTATION_CLASS_UID;

const ASSOCIATE_AC_LIMIT: usize = 64 * 1024;

#[derive(Debug, Clone)]
struct AcceptedContext {
    id: u8,
    abstract_syntax: String,
    transfer_syntax: String,
}

/// An open association initiated by this node.
pub struct ScuAssociation {
    stream: TcpStream,
    cfg: AssociationConfig,
    contexts: Vec<AcceptedContext>,
    assembler: MessageAssembler,
    /// Largest P-DATA-TF payload the peer accepts; 0 means unlimited.
    peer_max_pdu: u32,
    next_message_id: u16,
}

/// Per-instance result of a store operation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StoreOutcome {
    pub sop_instance_uid: String,
    pub status: u16,
}

impl ScuAssociation {
    /// Opens an association proposing `(abstract syntax, transfer syntaxes)`
    /// pairs, each on its own presentation context.
    pub fn open<A: ToSocketAddrs + std::fmt::Debug>(
        addr: A,
        cfg: &AssociationConfig,
        proposals: &[(String, Vec<String>)],
    ) -> Result<Self, DimseError> {
        let label = format!("{addr:?}");
        let connect_failed = |e: std::io::Error| DimseError::ConnectFailed {
            addr: label.clone(),
            reason: e.to_string(),
        };
        let target = addr
            .to_socket_addrs()
            .map_err(connect_failed)?
            .next()
            .ok_or_else(|| DimseError::ConnectFailed {
                addr: label.clone(),
                reason: "address did not resolve".into(),
            })?;
        let mut stream =
            TcpStream::connect_timeout(&target, cfg.association_request_timeout).map_err(connect_failed)?;
        stream.set_nodelay(true)?;
        if proposals.len() > 128 {
            return Err(DimseError::Config("more than 128 presentation contexts proposed".into()));
        }
        let presentation_contexts: Vec<PresentationContextRq> = proposals
            .iter()
            .enumerate()
            .map(|(i, (abs, ts))| PresentationContextRq {
                id: (2 * i + 1) as u8,
                abstract_syntax: abs.clone(),
                transfer_syntaxes: ts.clone(),
            })
            .collect();
        let rq = AssociateRq {
            protocol_version: PROTOCOL_VERSION,
            called_ae: cfg.called_ae.clone(),
            calling_ae: cfg.calling_ae.clone(),
            application_context: APPLICATION_CONTEXT.to_string(),
            presentation_contexts: presentation_contexts.clone(),
            user_info: UserInformation {
                max_pdu_length: cfg.max_pdu_length,
                implementation_class_uid: Some(IMPLEMENTATION_CLASS_UID.to_string()),
                implementation_version_name: Some(super::IMPLEMENTATION_VERSION_NAME.to_string()),
                other: Vec::new(),
            },
        };
        write_pdu(&mut stream, &Pdu::AssociateRq(rq))?;
        stream.set_read_timeout(Some(cfg.association_request_timeout))?;
        let ac = match read_pdu(&mut stream, ASSOCIATE_AC_LIMIT)? {
            Pdu::AssociateAc(ac) => ac,
            Pdu::AssociateRj(rj) => return Err(DimseError::AssociationRejected(rj)),
            Pdu::Abort(a) => {
                return Err(DimseError::PeerAborted {
                    origin: a.source,
                    reason: a.reason,
                })
            }
            other => {
                return Err(DimseError::ProtocolViolation(format!(
                    "{} received in reply to A-ASSOCIATE-RQ",
                    other.name()
                )))
            }
        };
        let proposed: BTreeMap<u8, &PresentationContextRq> =
            presentation_contexts.iter().map(|pc| (pc.id, pc)).collect();
        let mut contexts = Vec::new();
        for pc in &ac.presentation_contexts {
            if pc.result != ContextResult::Accepted {
                continue;
            }
            let Some(rq) = proposed.get(&pc.id) else {
                return Err(DimseError::ProtocolViolation(format!(
                    "acceptor answered unproposed context {}",
                    pc.id
                )));
            };
            if !rq.transfer_syntaxes.contains(&pc.transfer_syntax) {
                return Err(DimseError::ProtocolViolation(format!(
                    "acceptor chose unproposed transfer syntax {}",
                    pc.transfer_syntax
                )));
            }
            contexts.push(AcceptedContext {
                id: pc.id,
                abstract_syntax: rq.abstract_syntax.clone(),
                transfer_syntax: pc.transfer_syntax.clone(),
            });
        }
        stream.set_read_timeout(Some(cfg.idle_timeout))?;
        let assembler = MessageAssembler::new(contexts.iter().map(|c| (c.id, c.transfer_syntax.clone())).collect());
        Ok(ScuAssociation {
            stream,
            cfg: cfg.clone(),
            contexts,
            assembler,
            peer_max_pdu: ac.user_info.max_pdu_length,
            next_message_id: 1,
        })
    }

    /// Maximum P-DATA-TF payload used when sending.
    pub fn send_limit(&self) -> u32 {
        self.peer_max_pdu
    }

    pub fn echo(&mut self) -> Result<u16, DimseError> {
        let ctx = self
            .contexts
            .iter()
            .find(|c| c.abstract_syntax == VERIFICATION_SOP_CLASS)
            .map(|c| c.id)
            .ok_or_else(|| DimseError::NoAcceptedContext(VERIFICATION_SOP_CLASS.to_string()))?;
        let rq = DimseMessage::echo_rq(self.take_message_id());
        self.send(ctx, &rq, None)?;
        self.await_response(&rq, CommandField::CEchoRsp)
    }

    /// Sends one Part-10 file, transcoding the body when the accepted
    /// transfer syntax differs from the file's.
    pub fn store(&mut self, part10: &[u8]) -> Result<u16, DimseError> {
        let (meta, body) = split_part10(part10)?;
        let class = meta.media_sop_class_uid.clone();
        let ctx = self
            .contexts
            .iter()
            .filter(|c| c.abstract_syntax == class)
            .min_by_key(|c| c.transfer_syntax != meta.transfer_syntax_uid)
            .cloned()
            .ok_or_else(|| DimseError::NoAcceptedContext(class.clone()))?;
        let transcoded;
        let payload: &[u8] = if ctx.transfer_syntax == meta.transfer_syntax_uid {
            body
        } else {
            let ds = read_dataset(body, meta.transfer_syntax()?)?;
            transcoded = write_dataset(&ds, TransferSyntax::from_uid(&ctx.transfer_syntax)?)?;
            &transcoded
        };
        let rq = DimseMessage::store_rq(self.take_message_id(), &class, &meta.media_sop_instance_uid);
        self.send(ctx.id, &rq, Some(payload))?;
        self.await_response(&rq, CommandField::CStoreRsp)
    }

    pub fn release(mut self) -> Result<(), DimseError> {
        write_pdu(&mut self.stream, &Pdu::ReleaseRq)?;
        self.stream.set_read_timeout(Some(self.cfg.association_request_timeout))?;
        loop {
            match read_pdu(&mut self.stream, self.cfg.max_pdu_length as usize)? {
                Pdu::ReleaseRp => return Ok(()),
                Pdu::PDataTf(_) => continue,
                Pdu::Abort(a) => {
                    return Err(DimseError::PeerAborted {
                        origin: a.source,
                        reason: a.reason,
                    })
                }
                other => {
                    return Err(DimseError::ProtocolViolation(format!(
                        "{} received in reply to A-RELEASE-RQ",
                        other.name()
                    )))
                }
            }
        }
    }

    pub fn abort(mut self) {
        let _ = write_pdu(&mut self.stream, &Pdu::Abort(Abort { source: 0, reason: 0 }));
    }

    fn take_message_id(&mut self) -> u16 {
        let id = self.next_message_id;
        self.next_message_id = self.next_message_id.wrapping_add(1).max(1);
        id
    }

    fn send(&mut self, ctx: u8, cmd: &DimseMessage, dataset: Option<&[u8]>) -> Result<(), DimseError> {
        for pdu in fragment(ctx, true, &cmd.encode()?, self.peer_max_pdu) {
            write_pdu(&mut self.stream, &pdu)?;
        }
        if let Some(data) = dataset {
            for pdu in fragment(ctx, false, data, self.peer_max_pdu) {
                write_pdu(&mut self.stream, &pdu)?;
            }
        }
        Ok(())
    }

    fn await_response(&mut self, rq: &DimseMessage, expected: CommandField) -> Result<u16, DimseError> {
        loop {
            let pdu = read_pdu(&mut self.stream, self.cfg.max_pdu_length as usize)?;
            let p = match pdu {
                Pdu::PDataTf(p) => p,
                Pdu::Abort(a) => {
                    return Err(DimseError::PeerAborted {
                        origin: a.source,
                        reason: a.reason,
                    })
                }
                other => {
                    return Err(DimseError::ProtocolViolation(format!(
                        "{} received while awaiting a response",
                        other.name()
                    )))
                }
            };
            if let Some(ReceivedMessage { command, .. }) = self.assembler.push(p)?.into_iter().next() {
                if command.command_field != expected || command.message_id != rq.message_id {
                    return Err(DimseError::ProtocolViolation(format!(
                        "unexpected response {:04X} to message {}",
                        command.command_field.code(),
                        command.message_id
                    )));
                }
                return Ok(command.status.unwrap_or_default());
            }
        }
    }
}

fn other_syntax(ts: &str) -> &'static str {
    if ts == EXPLICIT_VR_LITTLE_ENDIAN {
        IMPLICIT_VR_LITTLE_ENDIAN
    } else {
        EXPLICIT_VR_LITTLE_ENDIAN
    }
}

/// Sends every file on one association and releases it.
pub fn scu_send<A: ToSocketAddrs + std::fmt::Debug>(
    addr: A,
    cfg: &AssociationConfig,
    files: &[Vec<u8>],
) -> Result<Vec<StoreOutcome>, DimseError> {
    let mut metas = Vec::with_capacity(files.len());
    let mut proposals: Vec<(String, Vec<String>)> = Vec::new();
    for file in files {
        let (meta, _) = split_part10(file)?;
        let key = (
            meta.media_sop_class_uid.clone(),
            vec![meta.transfer_syntax_uid.clone(), other_syntax(&meta.transfer_syntax_uid).to_string()],
        );
        if !proposals.contains(&key) {
            proposals.push(key);
        }
        metas.push(meta);
    }
    proposals.push((
        VERIFICATION_SOP_CLASS.to_string(),
        vec![IMPLICIT_VR_LITTLE_ENDIAN.to_string()],
    ));
    let mut assoc = ScuAssociation::open(addr, cfg, &proposals)?;
    let mut outcomes = Vec::with_capacity(files.len());
    for (file, meta) in files.iter().zip(metas) {
        let status = match assoc.store(file) {
            Ok(status) => status,
            Err(e) => {
                assoc.abort();
                return Err(e);
            }
        };
        outcomes.push(StoreOutcome {
            sop_instance_uid: meta.media_sop_instance_uid,
            status,
        });
    }
    assoc.release()?;
    Ok(outcomes)
}

/// Opens a verification-only association, sends one C-ECHO and releases.
pub fn scu_echo<A: ToSocketAddrs + std::fmt::Debug>(addr: A, cfg: &AssociationConfig) -> Result<u16, DimseError> {
    let proposals = [(
        VERIFICATION_SOP_CLASS.to_string(),
        vec![IMPLICIT_VR_LITTLE_ENDIAN.to_string(), EXPLICIT_VR_LITTLE_ENDIAN.to_string()],
    )];
    let mut assoc = ScuAssociation::open(addr, cfg, &proposals)?;
    let status = assoc.echo()?;
    assoc.release()?;
    Ok(status)
}
